//! Plot-level cross-validation, confusion matrices and accuracy metrics.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use thiserror::Error;

use crate::dataset::{Plot, SitsDataset};
use crate::forest::{self, ForestConfig, ForestError, RandomForest};
use crate::imbalance::{self, ImbalanceError, ImbalanceMethod, ResampleConfig};
use crate::models::{self, Architecture, ModelConfig, ModelError, ModelInstance};
use crate::preprocess::{self, FeatureMatrix, PreprocessError, SYNTHETIC_PLOT};
use crate::rng;
use crate::training::{self, TrainConfig, TrainError, TrainReport};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("k must be at least 2, got {0}")]
    InvalidK(usize),
    #[error("k = {k} exceeds the {plots} available plots")]
    TooFewPlots { k: usize, plots: usize },
    #[error("length mismatch: {0} true labels, {1} predictions")]
    LengthMismatch(usize, usize),
    #[error("label {label} out of range for {n_classes} classes")]
    InvalidLabel { label: usize, n_classes: usize },
    #[error("class `{0}` has no plot")]
    EmptyClass(String),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Forest(#[from] ForestError),
    #[error(transparent)]
    Imbalance(#[from] ImbalanceError),
}

/// Plot to fold map.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldAssignment {
    pub k: usize,
    pub folds: BTreeMap<u64, usize>,
}

impl FoldAssignment {
    pub fn fold_of(&self, plot_id: u64) -> Option<usize> {
        self.folds.get(&plot_id).copied()
    }

    /// `(train rows, test rows)` of `fold` over the rows of `m`.
    pub fn split(&self, m: &FeatureMatrix, fold: usize) -> (Vec<usize>, Vec<usize>) {
        (0..m.n_rows).partition(|&i| self.fold_of(m.plot_ids[i]) != Some(fold))
    }
}

/// Shuffles plots within each class and deals them round-robin to folds.
/// The dealing position carries over from one class to the next so small
/// classes do not all land in the first folds.
pub fn stratified_group_kfold(plots: &[Plot], k: usize, seed: u64) -> Result<FoldAssignment, EvalError> {
    if k < 2 {
        return Err(EvalError::InvalidK(k));
    }
    if k > plots.len() {
        return Err(EvalError::TooFewPlots { k, plots: plots.len() });
    }
    let mut by_class: BTreeMap<usize, Vec<u64>> = BTreeMap::new();
    for p in plots {
        by_class.entry(p.label).or_default().push(p.plot_id);
    }
    let mut r = rng::stream(seed, rng::tag::KFOLD);
    let mut folds = BTreeMap::new();
    let mut next = 0;
    for ids in by_class.values_mut() {
        ids.sort_unstable();
        ids.shuffle(&mut r);
        for &id in ids.iter() {
            folds.insert(id, next);
            next = (next + 1) % k;
        }
    }
    Ok(FoldAssignment { k, folds })
}

/// Row = true class, column = predicted class.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionMatrix {
    pub n_classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn get(&self, i: usize, j: usize) -> u64 {
        self.counts[i * self.n_classes + j]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sum(&self, i: usize) -> u64 {
        (0..self.n_classes).map(|j| self.get(i, j)).sum()
    }

    pub fn col_sum(&self, j: usize) -> u64 {
        (0..self.n_classes).map(|i| self.get(i, j)).sum()
    }

    /// Rows divided by their sums; empty rows stay zero.
    pub fn row_normalized(&self) -> Vec<f64> {
        let k = self.n_classes;
        let mut out = vec![0.0; k * k];
        for i in 0..k {
            let s = self.row_sum(i);
            if s > 0 {
                for j in 0..k {
                    out[i * k + j] = self.get(i, j) as f64 / s as f64;
                }
            }
        }
        out
    }

    pub fn add(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn to_csv(&self, class_names: &[String]) -> String {
        grid_csv(class_names, &self.counts.iter().map(|&c| c.to_string()).collect::<Vec<_>>())
    }
}

fn grid_csv(class_names: &[String], cells: &[String]) -> String {
    let k = class_names.len();
    let mut out = format!("true\\pred,{}\n", class_names.join(","));
    for i in 0..k {
        let _ = writeln!(out, "{},{}", class_names[i], cells[i * k..(i + 1) * k].join(","));
    }
    out
}

pub fn confusion_matrix(y_true: &[usize], y_pred: &[usize], n_classes: usize) -> Result<ConfusionMatrix, EvalError> {
    if y_true.len() != y_pred.len() {
        return Err(EvalError::LengthMismatch(y_true.len(), y_pred.len()));
    }
    let mut counts = vec![0; n_classes * n_classes];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        if let Some(&label) = [t, p].iter().find(|&&l| l >= n_classes) {
            return Err(EvalError::InvalidLabel { label, n_classes });
        }
        counts[t * n_classes + p] += 1;
    }
    Ok(ConfusionMatrix { n_classes, counts })
}

/// Scores of a single evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
    /// Classes with at least one true sample.
    pub present: Vec<bool>,
    pub f1_macro: f64,
    pub oa: f64,
    pub ba: f64,
}

impl Metrics {
    pub fn absent_classes(&self) -> Vec<usize> {
        self.present.iter().enumerate().filter(|(_, &p)| !p).map(|(i, _)| i).collect()
    }
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

fn build_metrics(cm: &ConfusionMatrix, exclude_absent: bool) -> Metrics {
    let k = cm.n_classes;
    let present: Vec<bool> = (0..k).map(|i| cm.row_sum(i) > 0).collect();
    let precision: Vec<f64> = (0..k).map(|j| ratio(cm.get(j, j), cm.col_sum(j))).collect();
    let recall: Vec<f64> = (0..k).map(|i| ratio(cm.get(i, i), cm.row_sum(i))).collect();
    let f1: Vec<f64> = precision
        .iter()
        .zip(&recall)
        .map(|(&p, &r)| if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) })
        .collect();
    let included: Vec<usize> = (0..k).filter(|&i| !exclude_absent || present[i]).collect();
    let mean = |v: &[f64]| {
        if included.is_empty() {
            0.0
        } else {
            included.iter().map(|&i| v[i]).sum::<f64>() / included.len() as f64
        }
    };
    let trace: u64 = (0..k).map(|i| cm.get(i, i)).sum();
    Metrics { f1_macro: mean(&f1), ba: mean(&recall), oa: ratio(trace, cm.total()), precision, recall, f1, present }
}

/// Per-class and macro scores; classes without true samples count as
/// recall 0 and are flagged in `present`.
pub fn metrics(cm: &ConfusionMatrix) -> Metrics {
    build_metrics(cm, false)
}

/// As [`metrics`], but macro averages skip classes without true samples.
pub fn metrics_excluding_absent(cm: &ConfusionMatrix) -> Metrics {
    build_metrics(cm, true)
}

/// Plot retrieval at one threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct PlotRecall {
    pub threshold: f64,
    pub retrieved: Vec<usize>,
    pub plots: Vec<usize>,
    /// `None` for classes without plots.
    pub recall: Vec<Option<f64>>,
    /// Mean over classes with plots.
    pub ba: f64,
}

/// A plot is retrieved when strictly more than `threshold` of its pixels
/// are correctly classified. Synthetic rows are ignored.
pub fn plot_level_recall(
    plot_ids: &[u64],
    y_true: &[usize],
    y_pred: &[usize],
    n_classes: usize,
    threshold: f64,
) -> PlotRecall {
    let mut per_plot: BTreeMap<u64, (usize, usize, usize)> = BTreeMap::new();
    for ((&p, &t), &y) in plot_ids.iter().zip(y_true).zip(y_pred) {
        if p == SYNTHETIC_PLOT {
            continue;
        }
        let e = per_plot.entry(p).or_insert((t, 0, 0));
        e.1 += usize::from(t == y);
        e.2 += 1;
    }
    let mut retrieved = vec![0; n_classes];
    let mut plots = vec![0; n_classes];
    for &(label, correct, total) in per_plot.values() {
        plots[label] += 1;
        if correct as f64 / total as f64 > threshold {
            retrieved[label] += 1;
        }
    }
    let recall: Vec<Option<f64>> =
        (0..n_classes).map(|c| (plots[c] > 0).then(|| retrieved[c] as f64 / plots[c] as f64)).collect();
    let known: Vec<f64> = recall.iter().flatten().copied().collect();
    let ba = if known.is_empty() { 0.0 } else { known.iter().sum::<f64>() / known.len() as f64 };
    PlotRecall { threshold, retrieved, plots, recall, ba }
}

/// Everything computed from one set of predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub confusion: ConfusionMatrix,
    pub metrics: Metrics,
    pub plots_50: PlotRecall,
    pub plots_20: PlotRecall,
}

pub fn evaluate_predictions(
    plot_ids: &[u64],
    y_true: &[usize],
    y_pred: &[usize],
    n_classes: usize,
) -> Result<Evaluation, EvalError> {
    let confusion = confusion_matrix(y_true, y_pred, n_classes)?;
    Ok(Evaluation {
        metrics: metrics_excluding_absent(&confusion),
        plots_50: plot_level_recall(plot_ids, y_true, y_pred, n_classes, 0.5),
        plots_20: plot_level_recall(plot_ids, y_true, y_pred, n_classes, 0.2),
        confusion,
    })
}

impl Evaluation {
    pub fn to_text(&self, class_names: &[String]) -> String {
        let m = &self.metrics;
        let mut out = String::new();
        let _ = writeln!(out, "pixels: {}", self.confusion.total());
        let _ = writeln!(out, "F1-macro: {:.4}\nOA: {:.4}\nBA: {:.4}", m.f1_macro, m.oa, m.ba);
        let _ = writeln!(out, "plot BA (>50% correct): {:.4}", self.plots_50.ba);
        let _ = writeln!(out, "plot BA (>20% correct): {:.4}\n", self.plots_20.ba);
        out.push_str(&per_class_table(class_names, m, Some((&self.plots_50, &self.plots_20))));
        out
    }
}

fn per_class_table(class_names: &[String], m: &Metrics, plots: Option<(&PlotRecall, &PlotRecall)>) -> String {
    let width = class_names.iter().map(|c| c.len()).max().unwrap_or(5).max(5);
    let mut out = format!("{:<width$}  precision  recall     f1", "class");
    if plots.is_some() {
        out.push_str("  plots  plot@50  plot@20");
    }
    out.push('\n');
    let fmt_opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
    for (c, name) in class_names.iter().enumerate() {
        let flag = if m.present[c] { "" } else { "  (absent)" };
        let _ = write!(out, "{name:<width$}  {:>9.4}  {:>6.4}  {:>6.4}", m.precision[c], m.recall[c], m.f1[c]);
        if let Some((p50, p20)) = plots {
            let _ = write!(out, "  {:>5}  {:>7}  {:>7}", p50.plots[c], fmt_opt(p50.recall[c]), fmt_opt(p20.recall[c]));
        }
        let _ = writeln!(out, "{flag}");
    }
    out
}

/// Model family and its hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub enum ClassifierSpec {
    Neural { arch: Architecture, train: TrainConfig },
    Forest(ForestConfig),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Fitted {
    Neural(ModelInstance),
    Forest(RandomForest),
}

impl Fitted {
    pub fn predict(&self, m: &FeatureMatrix) -> Result<Vec<usize>, EvalError> {
        Ok(self.predict_proba(m)?.0)
    }

    /// Labels and row-major `[n, K]` probabilities (vote shares for forests).
    pub fn predict_proba(&self, m: &FeatureMatrix) -> Result<(Vec<usize>, Vec<f64>), EvalError> {
        Ok(match self {
            Fitted::Neural(model) => {
                let p = model.predict(&m.as_layout(model.config.arch.layout()))?;
                (p.classes, p.probabilities.data)
            }
            Fitted::Forest(f) => {
                let p = f.predict_matrix(m)?;
                (p.labels, p.vote_shares)
            }
        })
    }
}

/// Fits a classifier on an already standardized training slice.
pub fn fit(
    spec: &ClassifierSpec,
    train: &FeatureMatrix,
    n_classes: usize,
    resample: &ResampleConfig,
    seed: u64,
) -> Result<(Fitted, Option<TrainReport>), EvalError> {
    match spec {
        ClassifierSpec::Neural { arch, train: tc } => {
            let cfg = ModelConfig::new(arch.clone(), n_classes, train.n_bands, train.n_steps);
            let mut model = models::build(&cfg, seed)?;
            let tc = TrainConfig { seed, ..tc.clone() };
            let rs = ResampleConfig { seed, ..resample.clone() };
            let report = training::train(&mut model, &train.as_layout(arch.layout()), &tc, &rs)?;
            Ok((Fitted::Neural(model), Some(report)))
        }
        ClassifierSpec::Forest(fc) => {
            let rs = ResampleConfig { seed: rng::derive_seed(seed, resample.seed), ..resample.clone() };
            let fit = imbalance::apply(train, n_classes, &rs)?;
            let class_weights = (resample.method == ImbalanceMethod::ClassWeight).then_some(fit.class_weights);
            let fc = ForestConfig { seed, class_weights, ..fc.clone() };
            let data = fit.matrix.as_layout(preprocess::Layout::Flat);
            let forest = forest::train_forest(&forest::Samples::from_matrix(&data)?, n_classes, &fc)?;
            Ok((Fitted::Forest(forest), None))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvConfig {
    pub k: usize,
    pub seed: u64,
    pub classifier: ClassifierSpec,
    pub resample: ResampleConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldResult {
    pub fold: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub evaluation: Evaluation,
    pub test_pixels: Vec<u64>,
    pub train_report: Option<TrainReport>,
}

/// Mean and 95% half-width `1.96 s / sqrt(k)` of per-fold values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanCi {
    pub mean: f64,
    pub ci95: f64,
}

impl MeanCi {
    pub fn of(values: &[f64]) -> Self {
        let k = values.len() as f64;
        let mean = values.iter().sum::<f64>() / k;
        let s = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, ci95: 1.96 * s / k.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvReport {
    pub class_names: Vec<String>,
    pub k: usize,
    pub seed: u64,
    pub folds: Vec<FoldResult>,
    pub f1_macro: MeanCi,
    pub oa: MeanCi,
    pub ba: MeanCi,
    pub plot_ba_50: MeanCi,
    pub plot_ba_20: MeanCi,
    /// Sum of fold confusion matrices.
    pub pooled: ConfusionMatrix,
    /// Mean of the fold matrices, each row-normalized first.
    pub mean_normalized: Vec<f64>,
}

/// k-fold plot-level cross-validation. Standardization statistics and any
/// resampling are fit on the training folds only.
pub fn run_cv(ds: &SitsDataset, cfg: &CvConfig) -> Result<CvReport, EvalError> {
    let k_classes = ds.n_classes();
    for (c, name) in ds.class_names.iter().enumerate() {
        if !ds.plots.iter().any(|p| p.label == c) {
            return Err(EvalError::EmptyClass(name.clone()));
        }
    }
    let features = preprocess::build_features(ds)?;
    let assignment = stratified_group_kfold(&ds.plots, cfg.k, cfg.seed)?;
    for c in 0..k_classes {
        let n = ds.plots.iter().filter(|p| p.label == c).count();
        if n < cfg.k {
            log::warn!("class `{}` has {n} plots for {} folds; some test folds lack it", ds.class_names[c], cfg.k);
        }
    }
    let folds: Vec<FoldResult> = (0..cfg.k)
        .into_par_iter()
        .map(|f| run_fold(&features, &assignment, f, k_classes, cfg))
        .collect::<Result<_, _>>()?;

    let pick = |g: &dyn Fn(&FoldResult) -> f64| MeanCi::of(&folds.iter().map(g).collect::<Vec<_>>());
    let mut pooled = ConfusionMatrix { n_classes: k_classes, counts: vec![0; k_classes * k_classes] };
    let mut mean_normalized = vec![0.0; k_classes * k_classes];
    for f in &folds {
        pooled.add(&f.evaluation.confusion);
        for (a, b) in mean_normalized.iter_mut().zip(f.evaluation.confusion.row_normalized()) {
            *a += b / folds.len() as f64;
        }
    }
    Ok(CvReport {
        class_names: ds.class_names.clone(),
        k: cfg.k,
        seed: cfg.seed,
        f1_macro: pick(&|f| f.evaluation.metrics.f1_macro),
        oa: pick(&|f| f.evaluation.metrics.oa),
        ba: pick(&|f| f.evaluation.metrics.ba),
        plot_ba_50: pick(&|f| f.evaluation.plots_50.ba),
        plot_ba_20: pick(&|f| f.evaluation.plots_20.ba),
        folds,
        pooled,
        mean_normalized,
    })
}

fn run_fold(
    features: &FeatureMatrix,
    assignment: &FoldAssignment,
    fold: usize,
    n_classes: usize,
    cfg: &CvConfig,
) -> Result<FoldResult, EvalError> {
    let seed = rng::derive_seed(cfg.seed, rng::tag::CV_FOLD + fold as u64);
    let (train_rows, test_rows) = assignment.split(features, fold);
    let train_raw = features.select_rows(&train_rows);
    let test_raw = features.select_rows(&test_rows);
    let stats = preprocess::standardize_fit(&train_raw)?;
    let train = preprocess::standardize_apply(&train_raw, &stats)?;
    let test = preprocess::standardize_apply(&test_raw, &stats)?;
    let (model, train_report) = fit(&cfg.classifier, &train, n_classes, &cfg.resample, seed)?;
    let pred = model.predict(&test)?;
    let evaluation = evaluate_predictions(&test.plot_ids, &test.labels, &pred, n_classes)?;
    let absent = evaluation.metrics.absent_classes();
    if !absent.is_empty() {
        log::warn!("fold {fold}: classes {absent:?} absent from the test fold and skipped in macro scores");
    }
    log::info!(
        "fold {fold}: F1 {:.4} OA {:.4} BA {:.4}",
        evaluation.metrics.f1_macro,
        evaluation.metrics.oa,
        evaluation.metrics.ba
    );
    Ok(FoldResult {
        fold,
        n_train: train.n_rows,
        n_test: test.n_rows,
        test_pixels: test.pixel_ids.clone(),
        evaluation,
        train_report,
    })
}

impl CvReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{}-fold plot-level cross-validation (seed {})\n", self.k, self.seed);
        let _ = writeln!(out, "fold  n_train  n_test  F1-macro      OA      BA  plot@50  plot@20  absent");
        for f in &self.folds {
            let (m, e) = (&f.evaluation.metrics, &f.evaluation);
            let absent: Vec<String> = m.absent_classes().iter().map(|&c| self.class_names[c].clone()).collect();
            let _ = writeln!(
                out,
                "{:>4}  {:>7}  {:>6}  {:>8.4}  {:>6.4}  {:>6.4}  {:>7.4}  {:>7.4}  {}",
                f.fold,
                f.n_train,
                f.n_test,
                m.f1_macro,
                m.oa,
                m.ba,
                e.plots_50.ba,
                e.plots_20.ba,
                if absent.is_empty() { "-".to_string() } else { absent.join(";") }
            );
        }
        let row = |name: &str, v: MeanCi| format!("{name:<10} {:.4} ({:.4})\n", v.mean, v.ci95);
        out.push_str("\nmean (95% CI half-width)\n");
        out.push_str(&row("F1-macro", self.f1_macro));
        out.push_str(&row("OA", self.oa));
        out.push_str(&row("BA", self.ba));
        out.push_str(&row("plot@50", self.plot_ba_50));
        out.push_str(&row("plot@20", self.plot_ba_20));
        out.push_str("\npooled per-class scores\n");
        out.push_str(&per_class_table(&self.class_names, &metrics(&self.pooled), None));
        out
    }

    /// One row per fold, then `mean` and `ci95` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("fold,n_train,n_test,f1_macro,oa,ba,plot_ba_50,plot_ba_20\n");
        for f in &self.folds {
            let (m, e) = (&f.evaluation.metrics, &f.evaluation);
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                f.fold, f.n_train, f.n_test, m.f1_macro, m.oa, m.ba, e.plots_50.ba, e.plots_20.ba
            );
        }
        let all = [self.f1_macro, self.oa, self.ba, self.plot_ba_50, self.plot_ba_20];
        let join = |g: fn(&MeanCi) -> f64| all.iter().map(|v| g(v).to_string()).collect::<Vec<_>>().join(",");
        let _ = writeln!(out, "mean,,,{}", join(|v| v.mean));
        let _ = writeln!(out, "ci95,,,{}", join(|v| v.ci95));
        out
    }

    pub fn mean_normalized_csv(&self) -> String {
        grid_csv(&self.class_names, &self.mean_normalized.iter().map(|v| v.to_string()).collect::<Vec<_>>())
    }
}
