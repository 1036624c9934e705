//! Omics matrices: CSV ingestion, inner-join integration, label encoding,
//! stratified folds and planted-signal synthetic datasets.

use crate::graph::{Interaction, InteractionTable};
use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use std::collections::{HashMap, HashSet};
use std::io::{Read, Write};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("first header must be 'sample_id', found '{0}'")]
    BadHeader(String),
    #[error("line {line}: duplicate sample id '{id}'")]
    DuplicateSample { line: u64, id: String },
    #[error("duplicate feature id '{0}'")]
    DuplicateFeature(String),
    #[error("line {line}: expected {expected} fields, found {actual}")]
    RaggedRow {
        line: u64,
        expected: usize,
        actual: usize,
    },
    #[error("line {line}, column {column} ('{feature}'): non-numeric value '{value}'")]
    NonNumericCell {
        line: u64,
        column: usize,
        feature: String,
        value: String,
    },
    #[error("{count} matrices but {prefixes} prefixes")]
    PrefixCount { count: usize, prefixes: usize },
    #[error("prefix '{0}' is empty or repeated")]
    BadPrefix(String),
    #[error("sample '{sample}' is labeled '{first}' in one source and '{second}' in another")]
    LabelConflict {
        sample: String,
        first: String,
        second: String,
    },
    #[error("sample '{0}' has no label")]
    MissingLabel(String),
    #[error("class {class} has {size} samples, fewer than {k} folds")]
    ClassTooSmall { class: usize, size: usize, k: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("unknown feature id '{0}'")]
    UnknownFeature(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Samples in rows, features in columns, optional per-sample labels.
#[derive(Debug, Clone, PartialEq)]
pub struct OmicsMatrix {
    pub sample_ids: Vec<String>,
    pub feature_ids: Vec<String>,
    pub values: Array2<f64>,
    pub labels: Vec<Option<String>>,
}

impl OmicsMatrix {
    pub fn new(
        sample_ids: Vec<String>,
        feature_ids: Vec<String>,
        values: Array2<f64>,
    ) -> Result<Self, DataError> {
        if values.dim() != (sample_ids.len(), feature_ids.len()) {
            return Err(DataError::InvalidParameter(format!(
                "values are {:?} but ids give ({}, {})",
                values.dim(),
                sample_ids.len(),
                feature_ids.len()
            )));
        }
        check_unique(&sample_ids, |id| DataError::DuplicateSample { line: 0, id })?;
        check_unique(&feature_ids, DataError::DuplicateFeature)?;
        let labels = vec![None; sample_ids.len()];
        Ok(OmicsMatrix {
            sample_ids,
            feature_ids,
            values,
            labels,
        })
    }

    pub fn num_samples(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn num_features(&self) -> usize {
        self.feature_ids.len()
    }

    /// Attaches labels by sample id; samples missing from `labels` stay
    /// unlabeled and ids not in the matrix are ignored.
    pub fn with_labels(mut self, labels: &[(String, String)]) -> Self {
        let table: HashMap<&str, &str> = labels
            .iter()
            .map(|(s, l)| (s.as_str(), l.as_str()))
            .collect();
        self.labels = self
            .sample_ids
            .iter()
            .map(|s| table.get(s.as_str()).map(|l| l.to_string()))
            .collect();
        self
    }

    pub fn label_pairs(&self) -> Vec<(String, String)> {
        self.sample_ids
            .iter()
            .zip(&self.labels)
            .filter_map(|(s, l)| l.as_ref().map(|l| (s.clone(), l.clone())))
            .collect()
    }

    pub fn select_features(&self, indices: &[usize]) -> OmicsMatrix {
        OmicsMatrix {
            sample_ids: self.sample_ids.clone(),
            feature_ids: indices.iter().map(|&j| self.feature_ids[j].clone()).collect(),
            values: self.values.select(Axis(1), indices),
            labels: self.labels.clone(),
        }
    }

    pub fn select_features_by_id(&self, ids: &[String]) -> Result<OmicsMatrix, DataError> {
        let index: HashMap<&str, usize> = self
            .feature_ids
            .iter()
            .enumerate()
            .map(|(j, id)| (id.as_str(), j))
            .collect();
        let indices = ids
            .iter()
            .map(|id| {
                index
                    .get(id.as_str())
                    .copied()
                    .ok_or_else(|| DataError::UnknownFeature(id.clone()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(self.select_features(&indices))
    }

    pub fn select_samples(&self, indices: &[usize]) -> OmicsMatrix {
        OmicsMatrix {
            sample_ids: indices.iter().map(|&i| self.sample_ids[i].clone()).collect(),
            feature_ids: self.feature_ids.clone(),
            values: self.values.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i].clone()).collect(),
        }
    }
}

fn check_unique(
    ids: &[String],
    err: impl Fn(String) -> DataError,
) -> Result<(), DataError> {
    let mut seen = HashSet::with_capacity(ids.len());
    for id in ids {
        if !seen.insert(id.as_str()) {
            return Err(err(id.clone()));
        }
    }
    Ok(())
}

fn csv_reader<R: Read>(reader: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader)
}

/// Reads a CSV whose first header is `sample_id` and whose remaining headers
/// are feature ids. Every cell must parse as a finite number.
pub fn load_matrix<R: Read>(reader: R) -> Result<OmicsMatrix, DataError> {
    let mut rdr = csv_reader(reader);
    let headers = rdr.headers()?.clone();
    let first = headers.get(0).unwrap_or("").trim();
    if first != "sample_id" {
        return Err(DataError::BadHeader(first.to_string()));
    }
    let feature_ids: Vec<String> = headers.iter().skip(1).map(|h| h.trim().to_string()).collect();
    check_unique(&feature_ids, DataError::DuplicateFeature)?;
    let width = feature_ids.len();
    let mut sample_ids = Vec::new();
    let mut seen = HashSet::new();
    let mut values = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() != width + 1 {
            return Err(DataError::RaggedRow {
                line,
                expected: width + 1,
                actual: record.len(),
            });
        }
        let id = record[0].trim().to_string();
        if !seen.insert(id.clone()) {
            return Err(DataError::DuplicateSample { line, id });
        }
        for (j, cell) in record.iter().skip(1).enumerate() {
            let cell = cell.trim();
            match cell.parse::<f64>() {
                Ok(v) if v.is_finite() => values.push(v),
                _ => {
                    return Err(DataError::NonNumericCell {
                        line,
                        column: j + 2,
                        feature: feature_ids[j].clone(),
                        value: cell.to_string(),
                    })
                }
            }
        }
        sample_ids.push(id);
    }
    let values = Array2::from_shape_vec((sample_ids.len(), width), values)
        .expect("row widths checked above");
    OmicsMatrix::new(sample_ids, feature_ids, values)
}

/// Writes the matrix with shortest round-trip float formatting, so
/// [`load_matrix`] recovers every value bitwise.
pub fn save_matrix<W: Write>(matrix: &OmicsMatrix, writer: W) -> Result<(), DataError> {
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header = vec!["sample_id".to_string()];
    header.extend(matrix.feature_ids.iter().cloned());
    wtr.write_record(&header)?;
    for (i, id) in matrix.sample_ids.iter().enumerate() {
        let mut row = vec![id.clone()];
        row.extend(matrix.values.row(i).iter().map(|v| v.to_string()));
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Reads a `sample_id,label` sidecar.
pub fn load_labels<R: Read>(reader: R) -> Result<Vec<(String, String)>, DataError> {
    let mut rdr = csv_reader(reader);
    let headers = rdr.headers()?.clone();
    let cols: Vec<&str> = headers.iter().map(str::trim).collect();
    if cols != ["sample_id", "label"] {
        return Err(DataError::BadHeader(cols.join(",")));
    }
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() != 2 {
            return Err(DataError::RaggedRow {
                line,
                expected: 2,
                actual: record.len(),
            });
        }
        let id = record[0].trim().to_string();
        if !seen.insert(id.clone()) {
            return Err(DataError::DuplicateSample { line, id });
        }
        out.push((id, record[1].trim().to_string()));
    }
    Ok(out)
}

pub fn save_labels<W: Write>(labels: &[(String, String)], writer: W) -> Result<(), DataError> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["sample_id", "label"])?;
    for (s, l) in labels {
        wtr.write_record([s, l])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Inner join on sample id. Rows follow the first matrix's order; columns are
/// concatenated with ids rewritten as `prefix:id`. An empty intersection
/// yields an empty matrix rather than an error.
pub fn integrate(matrices: &[OmicsMatrix], prefixes: &[String]) -> Result<OmicsMatrix, DataError> {
    if matrices.len() != prefixes.len() || matrices.is_empty() {
        return Err(DataError::PrefixCount {
            count: matrices.len(),
            prefixes: prefixes.len(),
        });
    }
    let mut seen = HashSet::new();
    for p in prefixes {
        if p.is_empty() || !seen.insert(p.as_str()) {
            return Err(DataError::BadPrefix(p.clone()));
        }
    }
    let indices: Vec<HashMap<&str, usize>> = matrices
        .iter()
        .map(|m| {
            m.sample_ids
                .iter()
                .enumerate()
                .map(|(i, s)| (s.as_str(), i))
                .collect()
        })
        .collect();
    let rows: Vec<Vec<usize>> = matrices[0]
        .sample_ids
        .iter()
        .filter_map(|s| {
            indices
                .iter()
                .map(|idx| idx.get(s.as_str()).copied())
                .collect::<Option<Vec<usize>>>()
        })
        .collect();

    let mut sample_ids = Vec::with_capacity(rows.len());
    let mut labels = Vec::with_capacity(rows.len());
    for r in &rows {
        let sample = matrices[0].sample_ids[r[0]].clone();
        let mut label: Option<&String> = None;
        for (m, &i) in matrices.iter().zip(r) {
            if let Some(l) = &m.labels[i] {
                match label {
                    Some(prev) if prev != l => {
                        return Err(DataError::LabelConflict {
                            sample,
                            first: prev.clone(),
                            second: l.clone(),
                        })
                    }
                    _ => label = Some(l),
                }
            }
        }
        labels.push(label.cloned());
        sample_ids.push(sample);
    }

    let width: usize = matrices.iter().map(|m| m.num_features()).sum();
    let mut feature_ids = Vec::with_capacity(width);
    for (m, p) in matrices.iter().zip(prefixes) {
        feature_ids.extend(m.feature_ids.iter().map(|f| format!("{p}:{f}")));
    }
    let mut values = Array2::zeros((rows.len(), width));
    for (out_row, r) in rows.iter().enumerate() {
        let mut offset = 0;
        for (m, &i) in matrices.iter().zip(r) {
            let w = m.num_features();
            values
                .row_mut(out_row)
                .slice_mut(ndarray::s![offset..offset + w])
                .assign(&m.values.row(i));
            offset += w;
        }
    }
    let mut out = OmicsMatrix::new(sample_ids, feature_ids, values)?;
    out.labels = labels;
    Ok(out)
}

/// Sorted class names and each sample's index into them.
pub fn encode_labels(matrix: &OmicsMatrix) -> Result<(Vec<String>, Vec<usize>), DataError> {
    let labels = matrix
        .labels
        .iter()
        .zip(&matrix.sample_ids)
        .map(|(l, s)| l.as_ref().ok_or_else(|| DataError::MissingLabel(s.clone())))
        .collect::<Result<Vec<_>, _>>()?;
    let mut classes: Vec<String> = labels.iter().map(|l| l.to_string()).collect();
    classes.sort();
    classes.dedup();
    let index: HashMap<&str, usize> = classes
        .iter()
        .enumerate()
        .map(|(i, c)| (c.as_str(), i))
        .collect();
    let codes = labels.iter().map(|l| index[l.as_str()]).collect();
    Ok((classes, codes))
}

/// Fold index for every sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldPlan {
    pub k: usize,
    pub assignments: Vec<usize>,
}

impl FoldPlan {
    /// `(train, test)` sample indices for fold `fold`, both ascending.
    pub fn split(&self, fold: usize) -> (Vec<usize>, Vec<usize>) {
        (0..self.assignments.len()).partition(|&i| self.assignments[i] != fold)
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &a in &self.assignments {
            sizes[a] += 1;
        }
        sizes
    }
}

/// Shuffles each class with one seeded stream (classes in ascending order)
/// and deals its samples round-robin over the folds. The dealing position
/// carries over from one class to the next, which keeps total fold sizes
/// within one of each other.
pub fn stratified_kfold(labels: &[usize], k: usize, seed: u64) -> Result<FoldPlan, DataError> {
    if k < 2 {
        return Err(DataError::InvalidParameter(format!("k = {k}, need k >= 2")));
    }
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut members = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        members[l].push(i);
    }
    for (class, m) in members.iter().enumerate() {
        if !m.is_empty() && m.len() < k {
            return Err(DataError::ClassTooSmall {
                class,
                size: m.len(),
                k,
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignments = vec![0; labels.len()];
    let mut next = 0;
    for m in &mut members {
        m.shuffle(&mut rng);
        for &i in m.iter() {
            assignments[i] = next;
            next = (next + 1) % k;
        }
    }
    Ok(FoldPlan { k, assignments })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub num_samples: usize,
    pub num_features: usize,
    pub num_classes: usize,
    pub num_informative: usize,
    /// Edge probability between two informative features; other pairs are
    /// linked with a tenth of it.
    pub graph_density: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_samples: 600,
            num_features: 50,
            num_classes: 3,
            num_informative: 10,
            graph_density: 0.3,
            noise_std: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub matrix: OmicsMatrix,
    pub interactions: InteractionTable,
    /// Column indices of the informative features, ascending.
    pub informative: Vec<usize>,
}

fn padded(prefix: &str, i: usize, n: usize) -> String {
    let width = n.saturating_sub(1).to_string().len();
    format!("{prefix}{i:0width$}")
}

/// Planted-signal dataset.
///
/// Labels cycle through the classes and are then shuffled. Each informative
/// feature gets class means from a random permutation of the unit-spaced
/// levels `c - (C - 1) / 2`, plus Gaussian noise with `noise_std`. The other
/// features are standard normal and carry no label information.
pub fn synthesize(config: &SynthConfig) -> Result<SynthData, DataError> {
    let SynthConfig {
        num_samples: n,
        num_features: d,
        num_classes: c,
        num_informative: m,
        graph_density,
        noise_std,
        seed,
    } = *config;
    if n == 0 || d == 0 || c == 0 {
        return Err(DataError::InvalidParameter(
            "samples, features and classes must be positive".into(),
        ));
    }
    if m > d {
        return Err(DataError::InvalidParameter(format!(
            "{m} informative features exceed {d} features"
        )));
    }
    if !(0.0..=1.0).contains(&graph_density) {
        return Err(DataError::InvalidParameter(format!(
            "graph density {graph_density} not in [0, 1]"
        )));
    }
    let noise = Normal::new(0.0, noise_std)
        .map_err(|_| DataError::InvalidParameter(format!("noise std {noise_std}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut labels: Vec<usize> = (0..n).map(|i| i % c).collect();
    labels.shuffle(&mut rng);
    let mut informative: Vec<usize> = rand::seq::index::sample(&mut rng, d, m).into_vec();
    informative.sort_unstable();
    let center = (c as f64 - 1.0) / 2.0;
    let mut means = HashMap::new();
    for &j in &informative {
        let mut levels: Vec<f64> = (0..c).map(|k| k as f64 - center).collect();
        levels.shuffle(&mut rng);
        means.insert(j, levels);
    }
    let values = Array2::from_shape_fn((n, d), |(i, j)| match means.get(&j) {
        Some(levels) => levels[labels[i]] + noise.sample(&mut rng),
        None => rng.sample(StandardNormal),
    });

    let sample_ids: Vec<String> = (0..n).map(|i| padded("s", i, n)).collect();
    let feature_ids: Vec<String> = (0..d).map(|j| padded("f", j, d)).collect();
    let class_names: Vec<String> = (0..c).map(|k| padded("class", k, c)).collect();

    let is_informative: HashSet<usize> = informative.iter().copied().collect();
    let mut rows = Vec::new();
    for a in 0..d {
        for b in a + 1..d {
            let both = is_informative.contains(&a) && is_informative.contains(&b);
            let p = if both { graph_density } else { graph_density / 10.0 };
            if rng.random::<f64>() < p {
                rows.push(Interaction {
                    node_a: feature_ids[a].clone(),
                    node_b: feature_ids[b].clone(),
                    combined_score: rng.random_range(400..=1000),
                });
            }
        }
    }

    let mut matrix = OmicsMatrix::new(sample_ids, feature_ids, values)?;
    matrix.labels = labels.iter().map(|&l| Some(class_names[l].clone())).collect();
    Ok(SynthData {
        matrix,
        interactions: InteractionTable { rows },
        informative,
    })
}
