use super::{mix_seed, Model, ModelConfig, ModelError};
use crate::data::{stratified_kfold, FoldPlan};
use crate::eval::{cv_aggregate, evaluate, CvSummary, MetricsReport};
use crate::graph::Graph;
use crate::kan::{adam_step, AdamState, KanError};
use crate::selection::{standardize, Standardization};
use ndarray::{ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            learning_rate: 0.01,
            weight_decay: 1e-4,
            batch_size: 64,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.batch_size < 2 {
            return Err(ModelError::InvalidConfig(format!(
                "batch_size {} (batch normalization needs at least 2)",
                self.batch_size
            )));
        }
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return Err(ModelError::InvalidConfig(format!(
                "learning_rate {}",
                self.learning_rate
            )));
        }
        if self.weight_decay < 0.0 || !self.weight_decay.is_finite() {
            return Err(ModelError::InvalidConfig(format!(
                "weight_decay {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Sample-weighted mean training loss of each epoch.
    pub loss_trace: Vec<f64>,
}

/// Splits a permutation into mini-batches; a trailing batch of one sample is
/// merged into the previous batch so batch normalization always sees two rows.
fn batches(order: &[usize], batch_size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(batch_size).collect();
    if out.len() >= 2 && out.last().map(|b| b.len()) == Some(1) {
        out.pop();
        let start = order.len() - batch_size - 1;
        *out.last_mut().expect("at least one batch") = &order[start..];
    }
    out
}

/// Mini-batch Adam on the cross-entropy loss. Each epoch reshuffles the
/// samples with a stream derived from `config.seed`, so training is
/// deterministic given the seed.
pub fn train(
    model: &mut Model,
    features: ArrayView2<f64>,
    labels: &[usize],
    config: &TrainConfig,
) -> Result<TrainReport, ModelError> {
    config.validate()?;
    let n = features.nrows();
    if n == 0 {
        return Err(ModelError::EmptyDataset);
    }
    if labels.len() != n {
        return Err(KanError::ShapeMismatch {
            expected: format!("{n} labels"),
            actual: labels.len().to_string(),
        }
        .into());
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= model.config().num_classes) {
        return Err(KanError::LabelOutOfRange {
            label,
            classes: model.config().num_classes,
        }
        .into());
    }
    if config.epochs > 0 && n < 2 {
        return Err(KanError::BatchTooSmall(n).into());
    }
    let mut state = AdamState::default();
    let mut loss_trace = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0u64;
    for epoch in 0..config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, epoch as u64));
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in batches(&order, config.batch_size) {
            step += 1;
            let x = features.select(Axis(0), batch);
            let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let dropout_seed = mix_seed(config.seed ^ 0xD0D0, step);
            let (loss, grads, updates) = model.loss_and_gradients(x.view(), &y, dropout_seed)?;
            adam_step(
                &mut model.param_slices_mut(),
                &grads.slices(),
                &mut state,
                config.learning_rate,
                config.weight_decay,
            )?;
            model.apply_running_updates(&updates)?;
            total += loss * batch.len() as f64;
        }
        loss_trace.push(total / n as f64);
    }
    Ok(TrainReport { loss_trace })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldOutcome {
    pub model: Model,
    pub standardization: Standardization,
    pub report: MetricsReport,
    pub train: TrainReport,
    pub test_indices: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvOutcome {
    pub plan: FoldPlan,
    pub folds: Vec<FoldOutcome>,
    pub summary: CvSummary,
}

/// Stratified k-fold cross-validation. Each fold standardizes with its own
/// training statistics, trains a fresh model and scores the held-out
/// samples. Folds run on the current rayon pool; results are ordered by fold.
pub fn cross_validate(
    features: ArrayView2<f64>,
    labels: &[usize],
    graph: &Graph,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    k: usize,
    seed: u64,
) -> Result<CvOutcome, ModelError> {
    model_config.validate()?;
    train_config.validate()?;
    if features.nrows() == 0 {
        return Err(ModelError::EmptyDataset);
    }
    let plan = stratified_kfold(labels, k, seed)?;
    let folds = (0..k)
        .into_par_iter()
        .map(|fold| run_fold(features, labels, graph, model_config, train_config, &plan, fold))
        .collect::<Result<Vec<_>, _>>()?;
    let reports: Vec<MetricsReport> = folds.iter().map(|f| f.report.clone()).collect();
    let summary = cv_aggregate(&reports)?;
    Ok(CvOutcome {
        plan,
        folds,
        summary,
    })
}

fn run_fold(
    features: ArrayView2<f64>,
    labels: &[usize],
    graph: &Graph,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    plan: &FoldPlan,
    fold: usize,
) -> Result<FoldOutcome, ModelError> {
    let (train_idx, test_idx) = plan.split(fold);
    let (x_train, stats) = standardize(features.select(Axis(0), &train_idx).view())?;
    let x_test = stats.apply(features.select(Axis(0), &test_idx).view())?;
    let y_train: Vec<usize> = train_idx.iter().map(|&i| labels[i]).collect();
    let y_test: Vec<usize> = test_idx.iter().map(|&i| labels[i]).collect();
    let mut cfg = model_config.clone();
    cfg.seed = mix_seed(model_config.seed, fold as u64);
    let mut tcfg = train_config.clone();
    tcfg.seed = mix_seed(train_config.seed, fold as u64);
    let mut model = Model::init(cfg, graph.clone())?;
    let train_report = train(&mut model, x_train.view(), &y_train, &tcfg)?;
    let predictions = model.predict(x_test.view())?;
    let report = evaluate(&y_test, &predictions, model_config.num_classes)?;
    Ok(FoldOutcome {
        model,
        standardization: stats,
        report,
        train: train_report,
        test_indices: test_idx,
    })
}

/// Hyperparameter lists whose Cartesian product is searched. An empty
/// `epochs` list means "use the base training configuration".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpace {
    pub learning_rates: Vec<f64>,
    pub weight_decays: Vec<f64>,
    pub dropout_rates: Vec<f64>,
    pub hidden_widths: Vec<usize>,
    #[serde(default)]
    pub epochs: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub dropout_rate: f64,
    pub hidden_width: usize,
    pub epochs: usize,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
}

impl GridRow {
    /// Preference order among equal accuracies: lower weight decay, then
    /// lower dropout, lower width, lower learning rate, fewer epochs.
    fn tie_key(&self) -> (f64, f64, usize, f64, usize) {
        (
            self.weight_decay,
            self.dropout_rate,
            self.hidden_width,
            self.learning_rate,
            self.epochs,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSearchOutcome {
    pub rows: Vec<GridRow>,
    pub best: usize,
}

/// Exhaustive search scored by mean cross-validated accuracy.
#[allow(clippy::too_many_arguments)]
pub fn grid_search(
    features: ArrayView2<f64>,
    labels: &[usize],
    graph: &Graph,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    space: &GridSpace,
    k: usize,
    seed: u64,
) -> Result<GridSearchOutcome, ModelError> {
    let epochs = if space.epochs.is_empty() {
        vec![train_config.epochs]
    } else {
        space.epochs.clone()
    };
    if space.learning_rates.is_empty()
        || space.weight_decays.is_empty()
        || space.dropout_rates.is_empty()
        || space.hidden_widths.is_empty()
    {
        return Err(ModelError::InvalidConfig("empty search space".into()));
    }
    let mut rows = Vec::new();
    for &learning_rate in &space.learning_rates {
        for &weight_decay in &space.weight_decays {
            for &dropout_rate in &space.dropout_rates {
                for &hidden_width in &space.hidden_widths {
                    for &ep in &epochs {
                        let mcfg = ModelConfig {
                            dropout_rate,
                            hidden_width,
                            ..model_config.clone()
                        };
                        let tcfg = TrainConfig {
                            learning_rate,
                            weight_decay,
                            epochs: ep,
                            ..train_config.clone()
                        };
                        let cv = cross_validate(features, labels, graph, &mcfg, &tcfg, k, seed)?;
                        rows.push(GridRow {
                            learning_rate,
                            weight_decay,
                            dropout_rate,
                            hidden_width,
                            epochs: ep,
                            mean_accuracy: cv.summary.mean.accuracy,
                            std_accuracy: cv.summary.std.accuracy,
                        });
                    }
                }
            }
        }
    }
    let mut best = 0;
    for (i, row) in rows.iter().enumerate().skip(1) {
        let current = &rows[best];
        let better = row.mean_accuracy > current.mean_accuracy
            || (row.mean_accuracy == current.mean_accuracy
                && row.tie_key().partial_cmp(&current.tie_key())
                    == Some(std::cmp::Ordering::Less));
        if better {
            best = i;
        }
    }
    Ok(GridSearchOutcome { rows, best })
}

#[cfg(test)]
mod tests {
    use super::batches;

    #[test]
    fn singleton_tail_is_merged() {
        let order: Vec<usize> = (0..9).collect();
        let b = batches(&order, 4);
        assert_eq!(b, vec![&order[0..4], &order[4..9]]);
        let b = batches(&order, 3);
        assert_eq!(b.len(), 3);
        let two: Vec<usize> = (0..2).collect();
        assert_eq!(batches(&two, 64), vec![&two[..]]);
    }
}
