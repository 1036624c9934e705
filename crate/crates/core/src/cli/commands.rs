use super::config::{lasso_features, load_dataset, load_graph, Dataset, RunConfig};
use super::io::{create_dir, open, write_atomic, write_ids, write_json, write_text};
use super::{
    usage, BuildGraphArgs, FilterArgs, ImportanceArgs, IntegrateArgs, ReportArgs, RunArgs,
    SelectArgs, SynthArgs,
};
use anyhow::Context;
use mogkan::data::{
    encode_labels, load_labels, load_matrix, save_labels, save_matrix, synthesize, DataError,
    OmicsMatrix, SynthConfig,
};
use mogkan::eval::{cv_aggregate, summary_table, Metrics, MetricsReport};
use mogkan::graph::{degree_filter, parse_interactions, write_interactions, InteractionTable};
use mogkan::model::{
    cross_validate, feature_importance, load_checkpoint, map_importance_to_genes,
    parse_gene_mapping, save_checkpoint, train as train_model, write_importance_tsv, Checkpoint,
    GeneMapping, Model, ModelConfig,
};
use mogkan::selection::{standardize, welch_filter_multiclass, LassoOptions};
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::path::Path;
use std::time::Instant;

pub fn synth(a: &SynthArgs) -> anyhow::Result<()> {
    let cfg = SynthConfig {
        num_samples: a.samples,
        num_features: a.features,
        num_classes: a.classes,
        num_informative: a.informative,
        graph_density: a.density,
        noise_std: a.noise,
        seed: a.seed,
    };
    let data = synthesize(&cfg).map_err(|e| match e {
        DataError::InvalidParameter(m) => usage(m),
        other => other.into(),
    })?;
    create_dir(&a.out)?;
    write_matrix(&a.out.join("matrix.csv"), &data.matrix)?;
    write_labels(&a.out.join("labels.csv"), &data.matrix.label_pairs())?;
    write_table(&a.out.join("interactions.tsv"), &data.interactions)?;
    let truth: Vec<String> = data
        .informative
        .iter()
        .map(|&i| data.matrix.feature_ids[i].clone())
        .collect();
    write_ids(&a.out.join("truth.txt"), &truth)?;
    eprintln!(
        "synth: {} samples, {} features ({} informative), {} interactions -> {}",
        cfg.num_samples,
        cfg.num_features,
        truth.len(),
        data.interactions.rows.len(),
        a.out.display()
    );
    Ok(())
}

fn load_labeled(matrix: &Path, labels: &Path) -> anyhow::Result<(OmicsMatrix, Vec<usize>)> {
    let m = load_matrix(open(matrix)?).with_context(|| format!("loading {}", matrix.display()))?;
    let pairs = load_labels(open(labels)?).with_context(|| format!("loading {}", labels.display()))?;
    let m = m.with_labels(&pairs);
    let (_, codes) = encode_labels(&m)?;
    Ok((m, codes))
}

pub fn filter(a: &FilterArgs) -> anyhow::Result<()> {
    if !(0.0..=1.0).contains(&a.p_threshold) {
        return Err(usage(format!("--p-threshold {} outside [0, 1]", a.p_threshold)));
    }
    let (m, codes) = load_labeled(&a.matrix, &a.labels)?;
    let keep = welch_filter_multiclass(m.values.view(), &codes, a.p_threshold)?;
    write_selection(&a.out, "filtered_features.txt", &m, &keep)?;
    eprintln!("filter: kept {} of {} features", keep.len(), m.num_features());
    Ok(())
}

pub fn select(a: &SelectArgs) -> anyhow::Result<()> {
    if !(a.lambda >= 0.0 && a.lambda.is_finite()) {
        return Err(usage(format!("--lambda {} must be finite and >= 0", a.lambda)));
    }
    if a.tol.is_nan() || a.tol <= 0.0 {
        return Err(usage(format!("--tol {} must be > 0", a.tol)));
    }
    let (m, codes) = load_labeled(&a.matrix, &a.labels)?;
    let opts = LassoOptions {
        tol: a.tol,
        max_iter: a.max_iter,
    };
    let keep = lasso_features(&m, &codes, a.lambda, opts)?;
    if keep.is_empty() {
        eprintln!("warning: lambda {} removes every feature", a.lambda);
    }
    write_selection(&a.out, "selected_features.txt", &m, &keep)?;
    eprintln!("select: kept {} of {} features", keep.len(), m.num_features());
    Ok(())
}

/// Writes the kept ids and the reduced matrix.
fn write_selection(out: &Path, list: &str, m: &OmicsMatrix, keep: &[usize]) -> anyhow::Result<()> {
    create_dir(out)?;
    let ids: Vec<String> = keep.iter().map(|&j| m.feature_ids[j].clone()).collect();
    write_ids(&out.join(list), &ids)?;
    write_matrix(&out.join("matrix.csv"), &m.select_features(keep))
}

pub fn integrate(a: &IntegrateArgs) -> anyhow::Result<()> {
    if a.matrices.len() != a.prefixes.len() {
        return Err(usage(format!(
            "{} --matrix but {} --prefix",
            a.matrices.len(),
            a.prefixes.len()
        )));
    }
    if !a.labels.is_empty() && a.labels.len() != a.matrices.len() {
        return Err(usage("--labels must be given once per --matrix or not at all"));
    }
    let mut matrices = Vec::with_capacity(a.matrices.len());
    for (i, path) in a.matrices.iter().enumerate() {
        let mut m = load_matrix(open(path)?).with_context(|| format!("loading {}", path.display()))?;
        if let Some(lp) = a.labels.get(i) {
            let pairs = load_labels(open(lp)?).with_context(|| format!("loading {}", lp.display()))?;
            m = m.with_labels(&pairs);
        }
        matrices.push(m);
    }
    let merged = mogkan::data::integrate(&matrices, &a.prefixes).map_err(|e| match e {
        DataError::PrefixCount { .. } | DataError::BadPrefix(_) => usage(e.to_string()),
        other => other.into(),
    })?;
    if merged.num_samples() == 0 {
        eprintln!("warning: no sample id is present in every matrix");
    }
    create_dir(&a.out)?;
    write_matrix(&a.out.join("matrix.csv"), &merged)?;
    let pairs = merged.label_pairs();
    if !a.labels.is_empty() {
        write_labels(&a.out.join("labels.csv"), &pairs)?;
    }
    eprintln!(
        "integrate: {} samples, {} features",
        merged.num_samples(),
        merged.num_features()
    );
    Ok(())
}

pub fn build_graph(a: &BuildGraphArgs) -> anyhow::Result<()> {
    let table = parse_interactions(open(&a.interactions)?)
        .with_context(|| format!("loading {}", a.interactions.display()))?;
    let graph = degree_filter(&mogkan::graph::build_graph(&table, a.min_score), a.min_degree)?;
    let kept: HashSet<&str> = graph.node_ids().iter().map(String::as_str).collect();
    let rows = table
        .rows
        .iter()
        .filter(|r| {
            r.combined_score >= a.min_score
                && kept.contains(r.node_a.as_str())
                && kept.contains(r.node_b.as_str())
        })
        .cloned()
        .collect();
    if graph.num_nodes() == 0 {
        eprintln!("warning: no node reaches degree {}", a.min_degree);
    }
    create_dir(&a.out)?;
    write_table(&a.out.join("interactions.tsv"), &InteractionTable { rows })?;
    write_ids(&a.out.join("nodes.txt"), graph.node_ids())?;
    eprintln!(
        "build-graph: {} nodes, {} edges",
        graph.num_nodes(),
        graph.edges().len()
    );
    Ok(())
}

fn model_config(cfg: &RunConfig, data: &Dataset) -> anyhow::Result<ModelConfig> {
    let mcfg = cfg
        .model
        .resolve(data.matrix.num_features(), data.classes.len());
    mcfg.validate().map_err(|e| usage(format!("config: {e}")))?;
    Ok(mcfg)
}

#[derive(Debug, Serialize)]
struct TrainSummary {
    classes: Vec<String>,
    num_samples: usize,
    num_features: usize,
    training_accuracy: f64,
    loss_trace: Vec<f64>,
}

pub fn train(a: &RunArgs) -> anyhow::Result<()> {
    let cfg = RunConfig::load(a)?;
    let data = load_dataset(&cfg)?;
    let graph = load_graph(&cfg, &data.matrix.feature_ids)?;
    let mcfg = model_config(&cfg, &data)?;
    let start = Instant::now();
    let (x, stats) = standardize(data.matrix.values.view())?;
    let mut model = Model::init(mcfg, graph)?;
    let report = train_model(&mut model, x.view(), &data.labels, &cfg.train.train_config())?;
    let predictions = model.predict(x.view())?;
    let correct = predictions
        .iter()
        .zip(&data.labels)
        .filter(|(p, y)| p == y)
        .count();
    let summary = TrainSummary {
        classes: data.classes.clone(),
        num_samples: data.matrix.num_samples(),
        num_features: data.matrix.num_features(),
        training_accuracy: correct as f64 / data.labels.len() as f64,
        loss_trace: report.loss_trace,
    };
    let out = &cfg.output.directory;
    create_dir(out)?;
    save_checkpoint(
        &Checkpoint::new(model, data.classes, Some(stats)),
        &out.join("model.json"),
    )?;
    write_json(&out.join("train.json"), &summary)?;
    eprintln!(
        "train: training accuracy {:.4} in {:.1}s -> {}",
        summary.training_accuracy,
        start.elapsed().as_secs_f64(),
        out.display()
    );
    Ok(())
}

/// Contents of `metrics.json`. Holds no timings, so reruns are byte-identical.
#[derive(Debug, Serialize, Deserialize)]
struct MetricsFile {
    classes: Vec<String>,
    num_samples: usize,
    num_features: usize,
    folds: Vec<FoldRecord>,
    summary: SummaryRecord,
    conventions: Conventions,
}

#[derive(Debug, Serialize, Deserialize)]
struct FoldRecord {
    fold: usize,
    test_samples: Vec<String>,
    final_train_loss: Option<f64>,
    report: MetricsReport,
}

#[derive(Debug, Serialize, Deserialize)]
struct SummaryRecord {
    mean: Metrics,
    std: Metrics,
    single_fold: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct Conventions {
    accuracy: String,
    undefined_ratios: String,
    std: String,
}

impl Default for Conventions {
    fn default() -> Self {
        Conventions {
            accuracy: "trace of the confusion matrix divided by its total".into(),
            undefined_ratios: "0/0 precision, recall or F1 reported as 0 and flagged".into(),
            std: "sample standard deviation (n - 1) across folds".into(),
        }
    }
}

pub fn cv(a: &RunArgs) -> anyhow::Result<()> {
    let cfg = RunConfig::load(a)?;
    let data = load_dataset(&cfg)?;
    let graph = load_graph(&cfg, &data.matrix.feature_ids)?;
    let mcfg = model_config(&cfg, &data)?;
    let start = Instant::now();
    let outcome = cross_validate(
        data.matrix.values.view(),
        &data.labels,
        &graph,
        &mcfg,
        &cfg.train.train_config(),
        cfg.train.folds,
        cfg.train.seed,
    )?;
    let out = &cfg.output.directory;
    create_dir(out)?;
    let mut folds = Vec::with_capacity(outcome.folds.len());
    for (i, fold) in outcome.folds.into_iter().enumerate() {
        folds.push(FoldRecord {
            fold: i,
            test_samples: fold
                .test_indices
                .iter()
                .map(|&s| data.matrix.sample_ids[s].clone())
                .collect(),
            final_train_loss: fold.train.loss_trace.last().copied(),
            report: fold.report,
        });
        let ckpt = Checkpoint::new(fold.model, data.classes.clone(), Some(fold.standardization));
        save_checkpoint(&ckpt, &out.join(format!("fold_{i}_model.json")))?;
    }
    let summary = outcome.summary;
    let table = summary_table("MOGKAN", &summary);
    let file = MetricsFile {
        classes: data.classes,
        num_samples: data.matrix.num_samples(),
        num_features: data.matrix.num_features(),
        folds,
        summary: SummaryRecord {
            mean: summary.mean,
            std: summary.std,
            single_fold: summary.single_fold,
        },
        conventions: Conventions::default(),
    };
    write_json(&out.join("metrics.json"), &file)?;
    write_text(&out.join("summary.txt"), &table)?;
    print!("{table}");
    eprintln!(
        "cv: {} folds in {:.1}s -> {}",
        cfg.train.folds,
        start.elapsed().as_secs_f64(),
        out.display()
    );
    Ok(())
}

pub fn importance(a: &ImportanceArgs) -> anyhow::Result<()> {
    if a.top_k == Some(0) {
        return Err(usage("--top-k must be at least 1"));
    }
    let ckpt = load_checkpoint(&a.checkpoint)
        .with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let mapping = match &a.mapping {
        Some(path) => parse_gene_mapping(open(path)?)
            .with_context(|| format!("loading {}", path.display()))?,
        None => GeneMapping::default(),
    };
    let mut ranking = feature_importance(&ckpt.model);
    if let Some(k) = a.top_k {
        ranking.truncate(k);
    }
    let rows = map_importance_to_genes(&ranking, &mapping);
    create_dir(&a.out)?;
    let path = a.out.join("importance.tsv");
    write_atomic(&path, |w| Ok(write_importance_tsv(&rows, w)?))?;
    eprintln!("importance: {} features -> {}", rows.len(), path.display());
    Ok(())
}

pub fn report(a: &ReportArgs) -> anyhow::Result<()> {
    if !a.names.is_empty() && a.names.len() != a.metrics.len() {
        return Err(usage("--name must be given once per --metrics or not at all"));
    }
    let mut text = String::new();
    for (i, path) in a.metrics.iter().enumerate() {
        let raw = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read {}", path.display()))?;
        let file: MetricsFile =
            serde_json::from_str(&raw).with_context(|| format!("parsing {}", path.display()))?;
        let reports: Vec<MetricsReport> = file.folds.into_iter().map(|f| f.report).collect();
        let summary = cv_aggregate(&reports)?;
        let name = match a.names.get(i) {
            Some(n) => n.clone(),
            None => path
                .parent()
                .and_then(|p| p.file_name())
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| "MOGKAN".to_string()),
        };
        if i > 0 {
            text.push('\n');
        }
        text.push_str(&summary_table(&name, &summary));
    }
    print!("{text}");
    if let Some(out) = &a.out {
        create_dir(out)?;
        write_text(&out.join("report.txt"), &text)?;
    }
    Ok(())
}

fn write_matrix(path: &Path, m: &OmicsMatrix) -> anyhow::Result<()> {
    write_atomic(path, |w| Ok(save_matrix(m, w)?))
}

fn write_labels(path: &Path, pairs: &[(String, String)]) -> anyhow::Result<()> {
    write_atomic(path, |w| Ok(save_labels(pairs, w)?))
}

fn write_table(path: &Path, table: &InteractionTable) -> anyhow::Result<()> {
    write_atomic(path, |w| Ok(write_interactions(table, w)?))
}
