//! Class weights, SMOTE, ADASYN and majority undersampling.
//!
//! Everything here receives only a training slice.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng as _;
use rayon::prelude::*;
use thiserror::Error;

use crate::preprocess::{FeatureMatrix, SYNTHETIC_PLOT};
use crate::rng;

#[derive(Debug, Error, PartialEq)]
pub enum ImbalanceError {
    #[error("class {class} has a single sample; oversampling needs at least 2")]
    SingletonClass { class: usize },
    #[error("undersampling target {target} exceeds the {available} plots of the majority class")]
    TargetExceedsPlots { target: usize, available: usize },
    #[error("invalid resampling config: {0}")]
    InvalidConfig(String),
    #[error("label {label} out of range for {n_classes} classes")]
    InvalidLabel { label: usize, n_classes: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImbalanceMethod {
    None,
    ClassWeight,
    Smote,
    Adasyn,
    Undersample,
}

impl ImbalanceMethod {
    pub const ALL: [&'static str; 5] = ["none", "class-weight", "smote", "adasyn", "undersample"];
}

impl FromStr for ImbalanceMethod {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s {
            "none" => Self::None,
            "class-weight" => Self::ClassWeight,
            "smote" => Self::Smote,
            "adasyn" => Self::Adasyn,
            "undersample" => Self::Undersample,
            _ => return Err(format!("unknown imbalance method `{s}` (expected one of {})", Self::ALL.join(", "))),
        })
    }
}

impl fmt::Display for ImbalanceMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let i = [Self::None, Self::ClassWeight, Self::Smote, Self::Adasyn, Self::Undersample]
            .iter()
            .position(|m| m == self)
            .unwrap();
        f.write_str(Self::ALL[i])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResampleConfig {
    pub method: ImbalanceMethod,
    pub k_neighbors: usize,
    pub undersample_plots: usize,
    pub seed: u64,
}

impl Default for ResampleConfig {
    fn default() -> Self {
        Self { method: ImbalanceMethod::None, k_neighbors: 5, undersample_plots: 400, seed: 0 }
    }
}

impl ResampleConfig {
    pub fn validate(&self) -> Result<(), ImbalanceError> {
        if self.k_neighbors == 0 {
            return Err(ImbalanceError::InvalidConfig("k_neighbors must be at least 1".into()));
        }
        if self.undersample_plots == 0 {
            return Err(ImbalanceError::InvalidConfig("undersample target must be at least 1".into()));
        }
        Ok(())
    }
}

pub fn class_counts(labels: &[usize], n_classes: usize) -> Vec<usize> {
    let mut c = vec![0; n_classes];
    for &l in labels {
        c[l] += 1;
    }
    c
}

/// Balanced inverse frequency `N / (K * N_k)`; absent classes get 0.
pub fn compute_class_weights(labels: &[usize], n_classes: usize) -> Vec<f64> {
    let counts = class_counts(labels, n_classes);
    let n = labels.len() as f64;
    counts
        .iter()
        .enumerate()
        .map(|(k, &c)| {
            if c == 0 {
                log::warn!("class {k} absent from training labels; weight set to 0");
                0.0
            } else {
                n / (n_classes as f64 * c as f64)
            }
        })
        .collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// The `k` nearest candidates of `query` (itself excluded), ordered by
/// (distance, index).
fn knn(m: &FeatureMatrix, query: usize, candidates: &[usize], k: usize) -> Vec<usize> {
    let q = m.row(query);
    let mut d: Vec<(f64, usize)> =
        candidates.iter().filter(|&&j| j != query).map(|&j| (sq_dist(q, m.row(j)), j)).collect();
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < d.len() {
        d.select_nth_unstable_by(k, cmp);
        d.truncate(k);
    }
    d.sort_by(cmp);
    d.into_iter().map(|(_, j)| j).collect()
}

fn check_labels(m: &FeatureMatrix, n_classes: usize) -> Result<(), ImbalanceError> {
    match m.labels.iter().find(|&&l| l >= n_classes) {
        Some(&label) => Err(ImbalanceError::InvalidLabel { label, n_classes }),
        None => Ok(()),
    }
}

fn members(m: &FeatureMatrix, n_classes: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); n_classes];
    for (i, &l) in m.labels.iter().enumerate() {
        out[l].push(i);
    }
    out
}

/// Classes needing synthetic rows, validated for size.
fn minority_classes(groups: &[Vec<usize>]) -> Result<(usize, Vec<usize>), ImbalanceError> {
    let target = groups.iter().map(Vec::len).max().unwrap_or(0);
    let mut out = Vec::new();
    for (c, g) in groups.iter().enumerate() {
        match g.len() {
            0 => log::warn!("class {c} absent from the training slice; not oversampled"),
            n if n == target => {}
            1 => return Err(ImbalanceError::SingletonClass { class: c }),
            _ => out.push(c),
        }
    }
    Ok((target, out))
}

fn capped_k(k: usize, class: usize, size: usize) -> usize {
    if k > size - 1 {
        log::warn!("class {class}: k={k} capped to {} (class size {size})", size - 1);
        size - 1
    } else {
        k
    }
}

fn push_synthetic(out: &mut FeatureMatrix, m: &FeatureMatrix, i: usize, j: usize, u: f64, label: usize) {
    let (a, b) = (m.row(i), m.row(j));
    out.data.extend(a.iter().zip(b).map(|(x, y)| x + u * (y - x)));
    out.pixel_ids.push(SYNTHETIC_PLOT);
    out.plot_ids.push(SYNTHETIC_PLOT);
    out.labels.push(label);
    out.n_rows += 1;
}

/// Oversamples every class to the majority count by interpolating between
/// a random member and one of its `k` nearest same-class neighbors.
pub fn smote(m: &FeatureMatrix, n_classes: usize, k: usize, seed: u64) -> Result<FeatureMatrix, ImbalanceError> {
    check_labels(m, n_classes)?;
    let groups = members(m, n_classes);
    let (target, minority) = minority_classes(&groups)?;
    let mut out = m.clone();
    for c in minority {
        let g = &groups[c];
        let kc = capped_k(k, c, g.len());
        let neighbors: Vec<Vec<usize>> = g.par_iter().map(|&i| knn(m, i, g, kc)).collect();
        let mut r = rng::stream(seed, rng::tag::SMOTE_CLASS + c as u64);
        for _ in 0..target - g.len() {
            let a = r.gen_range(0..g.len());
            let b = neighbors[a][r.gen_range(0..kc)];
            let u: f64 = r.gen();
            push_synthetic(&mut out, m, g[a], b, u, c);
        }
    }
    Ok(out)
}

/// Splits `total` proportionally to `weights` with the largest-remainder rule
/// (ties go to the lower index).
pub fn largest_remainder(weights: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let quotas: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut alloc: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = alloc.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| (quotas[b] - quotas[b].floor()).total_cmp(&(quotas[a] - quotas[a].floor())).then(a.cmp(&b)));
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        alloc[i] += 1;
    }
    alloc
}

/// Per-sample hardness: share of the `k` nearest neighbors in the full
/// training slice belonging to another class.
pub fn adasyn_hardness(m: &FeatureMatrix, class_rows: &[usize], k: usize) -> Vec<f64> {
    let all: Vec<usize> = (0..m.n_rows).collect();
    let k = k.min(m.n_rows - 1);
    class_rows
        .par_iter()
        .map(|&i| {
            let nn = knn(m, i, &all, k);
            nn.iter().filter(|&&j| m.labels[j] != m.labels[i]).count() as f64 / k as f64
        })
        .collect()
}

/// SMOTE with synthetic counts allocated by neighborhood hardness.
pub fn adasyn(m: &FeatureMatrix, n_classes: usize, k: usize, seed: u64) -> Result<FeatureMatrix, ImbalanceError> {
    check_labels(m, n_classes)?;
    let groups = members(m, n_classes);
    let (target, minority) = minority_classes(&groups)?;
    let mut out = m.clone();
    for c in minority {
        let g = &groups[c];
        let mut hardness = adasyn_hardness(m, g, k);
        if hardness.iter().all(|&r| r == 0.0) {
            log::warn!("class {c}: no sample has foreign neighbors; ADASYN falls back to uniform allocation");
            hardness.iter_mut().for_each(|r| *r = 1.0);
        }
        let alloc = largest_remainder(&hardness, target - g.len());
        let kc = capped_k(k, c, g.len());
        let mut r = rng::stream(seed, rng::tag::ADASYN_CLASS + c as u64);
        for (a, &n_new) in alloc.iter().enumerate() {
            if n_new == 0 {
                continue;
            }
            let nn = knn(m, g[a], g, kc);
            for _ in 0..n_new {
                let b = nn[r.gen_range(0..kc)];
                let u: f64 = r.gen();
                push_synthetic(&mut out, m, g[a], b, u, c);
            }
        }
    }
    Ok(out)
}

/// Keeps `target_plots` randomly chosen plots of the class with the most
/// plots, every pixel of the kept plots, and every other class untouched.
pub fn undersample_majority(
    m: &FeatureMatrix,
    n_classes: usize,
    target_plots: usize,
    seed: u64,
) -> Result<FeatureMatrix, ImbalanceError> {
    check_labels(m, n_classes)?;
    let mut plots: Vec<BTreeMap<u64, ()>> = vec![BTreeMap::new(); n_classes];
    for (&p, &l) in m.plot_ids.iter().zip(&m.labels) {
        plots[l].insert(p, ());
    }
    let majority = (0..n_classes).fold(0, |best, c| if plots[c].len() > plots[best].len() { c } else { best });
    let ids: Vec<u64> = plots[majority].keys().copied().collect();
    if target_plots > ids.len() {
        return Err(ImbalanceError::TargetExceedsPlots { target: target_plots, available: ids.len() });
    }
    let mut r = rng::stream(seed, rng::tag::UNDERSAMPLE);
    let keep: std::collections::HashSet<u64> =
        index::sample(&mut r, ids.len(), target_plots).into_iter().map(|i| ids[i]).collect();
    let rows: Vec<usize> =
        (0..m.n_rows).filter(|&i| m.labels[i] != majority || keep.contains(&m.plot_ids[i])).collect();
    Ok(m.select_rows(&rows))
}

/// Training slice after the configured strategy, with the loss class weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Resampled {
    pub matrix: FeatureMatrix,
    pub class_weights: Vec<f64>,
}

pub fn apply(m: &FeatureMatrix, n_classes: usize, cfg: &ResampleConfig) -> Result<Resampled, ImbalanceError> {
    cfg.validate()?;
    check_labels(m, n_classes)?;
    let uniform = vec![1.0; n_classes];
    Ok(match cfg.method {
        ImbalanceMethod::None => Resampled { matrix: m.clone(), class_weights: uniform },
        ImbalanceMethod::ClassWeight => {
            Resampled { matrix: m.clone(), class_weights: compute_class_weights(&m.labels, n_classes) }
        }
        ImbalanceMethod::Smote => Resampled { matrix: smote(m, n_classes, cfg.k_neighbors, cfg.seed)?, class_weights: uniform },
        ImbalanceMethod::Adasyn => Resampled { matrix: adasyn(m, n_classes, cfg.k_neighbors, cfg.seed)?, class_weights: uniform },
        ImbalanceMethod::Undersample => Resampled {
            matrix: undersample_majority(m, n_classes, cfg.undersample_plots, cfg.seed)?,
            class_weights: uniform,
        },
    })
}
