//! Random forest of fully grown CART trees.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index;
use rand::Rng as _;
use rayon::prelude::*;
use thiserror::Error;

use crate::preprocess::FeatureMatrix;
use crate::rng;

#[derive(Debug, Error)]
pub enum ForestError {
    #[error("cannot train on an empty sample set")]
    EmptyInput,
    #[error("label {label} out of range for {n_classes} classes")]
    InvalidLabel { label: usize, n_classes: usize },
    #[error("expected {expected} features, got {found}")]
    ShapeMismatch { expected: usize, found: usize },
    #[error("invalid forest config: {0}")]
    InvalidConfig(String),
    #[error("forest checkpoint line {line}: {reason}")]
    Checkpoint { line: usize, reason: String },
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForestConfig {
    pub n_trees: usize,
    /// `None` grows trees fully.
    pub max_depth: Option<usize>,
    pub min_samples_split: usize,
    /// `None` means `floor(sqrt(F))`.
    pub features_per_split: Option<usize>,
    pub class_weights: Option<Vec<f64>>,
    pub bootstrap: bool,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self {
            n_trees: 100,
            max_depth: None,
            min_samples_split: 2,
            features_per_split: None,
            class_weights: None,
            bootstrap: true,
            seed: 0,
        }
    }
}

impl ForestConfig {
    pub fn mtry(&self, n_features: usize) -> usize {
        self.features_per_split
            .unwrap_or_else(|| ((n_features as f64).sqrt().floor() as usize).max(1))
    }

    pub fn validate(&self, n_features: usize, n_classes: usize) -> Result<(), ForestError> {
        let bad = |m: String| Err(ForestError::InvalidConfig(m));
        if self.n_trees == 0 {
            return bad("n_trees must be at least 1".into());
        }
        let m = self.mtry(n_features);
        if m == 0 || m > n_features {
            return bad(format!("features_per_split {m} outside [1, {n_features}]"));
        }
        if self.min_samples_split < 2 {
            return bad("min_samples_split must be at least 2".into());
        }
        if let Some(w) = &self.class_weights {
            if w.len() != n_classes {
                return bad(format!("{} class weights for {n_classes} classes", w.len()));
            }
            if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return bad("class weights must be finite and non-negative".into());
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    /// `x[feature] <= threshold` goes left.
    Split { feature: usize, threshold: f64, left: usize, right: usize },
    /// Weighted class histogram of the training samples reaching the leaf.
    Leaf { hist: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecisionTree {
    pub nodes: Vec<Node>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RandomForest {
    pub config: ForestConfig,
    pub trees: Vec<DecisionTree>,
    pub n_classes: usize,
    pub n_features: usize,
}

/// Row-major samples.
#[derive(Debug, Clone, Copy)]
pub struct Samples<'a> {
    pub x: &'a [f64],
    pub n_features: usize,
    pub y: &'a [usize],
}

impl<'a> Samples<'a> {
    pub fn new(x: &'a [f64], n_features: usize, y: &'a [usize]) -> Result<Self, ForestError> {
        if y.is_empty() {
            return Err(ForestError::EmptyInput);
        }
        if n_features == 0 || x.len() != y.len() * n_features {
            return Err(ForestError::ShapeMismatch { expected: y.len() * n_features, found: x.len() });
        }
        Ok(Self { x, n_features, y })
    }

    pub fn from_matrix(m: &'a FeatureMatrix) -> Result<Self, ForestError> {
        Self::new(&m.data, m.n_features(), &m.labels)
    }
}

/// `1 - sum_k p_k^2` with `p_k` the weighted class share.
pub fn weighted_gini(counts: &[usize], class_weights: &[f64]) -> f64 {
    let w: Vec<f64> = counts.iter().zip(class_weights).map(|(&c, &w)| c as f64 * w).collect();
    let total: f64 = w.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    1.0 - w.iter().map(|v| (v / total).powi(2)).sum::<f64>()
}

/// `W * gini = W - sum c_k^2 / W` for weighted counts `c`.
fn scaled_impurity(total: f64, sum_sq: f64) -> f64 {
    if total <= 0.0 {
        0.0
    } else {
        total - sum_sq / total
    }
}

struct TreeParams<'a> {
    class_weights: &'a [f64],
    n_classes: usize,
    mtry: usize,
    max_depth: Option<usize>,
    min_samples_split: usize,
}

/// Column-major copy of the features with labels, shared by all trees.
struct Columns<'a> {
    cols: Vec<f64>,
    n: usize,
    n_features: usize,
    y: &'a [usize],
}

impl<'a> Columns<'a> {
    fn new(s: &Samples<'a>) -> Self {
        let (n, f) = (s.y.len(), s.n_features);
        let mut cols = vec![0.0; n * f];
        for (i, row) in s.x.chunks(f).enumerate() {
            for (j, &v) in row.iter().enumerate() {
                cols[j * n + i] = v;
            }
        }
        Self { cols, n, n_features: f, y: s.y }
    }

    fn col(&self, f: usize) -> &[f64] {
        &self.cols[f * self.n..(f + 1) * self.n]
    }
}

/// Order-preserving integer image of a float.
fn sort_key(v: f64) -> u64 {
    let b = v.to_bits();
    if b >> 63 == 1 {
        !b
    } else {
        b | (1 << 63)
    }
}

#[derive(Clone, Copy)]
struct Candidate {
    gain: f64,
    feature: usize,
    threshold: f64,
}

/// Node-local scratch buffers.
struct Scratch {
    order: Vec<(u64, u32)>,
    left: Vec<f64>,
    right: Vec<f64>,
}

/// Best split of `idx` on feature `f`, lowest threshold among equal gains.
/// `weight[i]` is the class weight times the bootstrap multiplicity of row `i`.
fn best_split_on(
    c: &Columns,
    idx: &[u32],
    weight: &[f64],
    f: usize,
    p: &TreeParams,
    parent: (&[f64], f64, f64),
    sc: &mut Scratch,
) -> Option<Candidate> {
    let (counts, total, sum_sq) = parent;
    let col = c.col(f);
    sc.order.clear();
    sc.order.extend(idx.iter().map(|&i| (sort_key(col[i as usize]), i)));
    sc.order.sort_unstable();
    if sc.order[0].0 == sc.order[sc.order.len() - 1].0 {
        return None;
    }
    let parent_imp = scaled_impurity(total, sum_sq);
    sc.left.clear();
    sc.left.resize(p.n_classes, 0.0);
    sc.right.clear();
    sc.right.extend_from_slice(counts);
    let (left, right) = (&mut sc.left, &mut sc.right);
    let (mut wl, mut wr) = (0.0, total);
    let (mut sl, mut sr) = (0.0, sum_sq);
    let mut best: Option<Candidate> = None;
    for w2 in sc.order.windows(2) {
        let (key, i) = w2[0];
        let k = c.y[i as usize];
        let w = weight[i as usize];
        sl += (left[k] + w).powi(2) - left[k].powi(2);
        sr += (right[k] - w).powi(2) - right[k].powi(2);
        left[k] += w;
        right[k] -= w;
        wl += w;
        wr -= w;
        if w2[1].0 == key {
            continue;
        }
        let gain = parent_imp - scaled_impurity(wl, sl) - scaled_impurity(wr.max(0.0), sr);
        if best.is_none_or(|b| gain > b.gain) {
            let (v, next) = (col[i as usize], col[w2[1].1 as usize]);
            let mut threshold = v + (next - v) / 2.0;
            if threshold >= next {
                threshold = v;
            }
            best = Some(Candidate { gain, feature: f, threshold });
        }
    }
    best
}

#[allow(clippy::too_many_arguments)]
fn best_split(
    c: &Columns,
    idx: &[u32],
    weight: &[f64],
    features: &[usize],
    p: &TreeParams,
    parent: (&[f64], f64, f64),
    sc: &mut Scratch,
) -> Option<Candidate> {
    let mut best: Option<Candidate> = None;
    for &f in features {
        if let Some(cand) = best_split_on(c, idx, weight, f, p, parent, sc) {
            if best.is_none_or(|b| cand.gain > b.gain) {
                best = Some(cand);
            }
        }
    }
    best
}

const GAIN_EPS: f64 = 1e-12;

/// Grows one CART tree. `mult[i]` is how often row `i` was drawn.
fn grow(c: &Columns, mult: &[u32], p: &TreeParams, rng: &mut rng::Rng) -> DecisionTree {
    let weight: Vec<f64> = (0..c.n).map(|i| p.class_weights[c.y[i]] * mult[i] as f64).collect();
    let idx: Vec<u32> = (0..c.n as u32).filter(|&i| mult[i as usize] > 0).collect();
    let mut sc = Scratch { order: Vec::with_capacity(idx.len()), left: Vec::new(), right: Vec::new() };
    let mut nodes: Vec<Node> = vec![Node::Leaf { hist: Vec::new() }];
    // (node slot, rows, depth)
    let mut stack = vec![(0usize, idx, 0usize)];
    while let Some((slot, rows, depth)) = stack.pop() {
        let mut hist = vec![0.0; p.n_classes];
        let mut present = vec![false; p.n_classes];
        let mut drawn = 0usize;
        for &i in &rows {
            let k = c.y[i as usize];
            hist[k] += weight[i as usize];
            present[k] = true;
            drawn += mult[i as usize] as usize;
        }
        let pure = present.iter().filter(|&&b| b).count() <= 1;
        let depth_ok = p.max_depth.is_none_or(|d| depth < d);
        if pure || !depth_ok || drawn < p.min_samples_split {
            nodes[slot] = Node::Leaf { hist };
            continue;
        }
        let total: f64 = hist.iter().sum();
        let sum_sq: f64 = hist.iter().map(|v| v * v).sum();
        let parent = (&hist[..], total, sum_sq);
        let mut sampled: Vec<usize> = index::sample(rng, c.n_features, p.mtry).into_vec();
        sampled.sort_unstable();
        let mut choice = best_split(c, &rows, &weight, &sampled, p, parent, &mut sc);
        if choice.is_none_or(|b| b.gain <= GAIN_EPS) {
            // Nothing useful among the sampled features: widen to all of them
            // so impure nodes keep splitting while any feature varies.
            let all: Vec<usize> = (0..c.n_features).collect();
            if let Some(b) = best_split(c, &rows, &weight, &all, p, parent, &mut sc) {
                if choice.is_none_or(|a| b.gain > a.gain + GAIN_EPS) {
                    choice = Some(b);
                }
            }
        }
        let Some(best) = choice else {
            nodes[slot] = Node::Leaf { hist };
            continue;
        };
        let col = c.col(best.feature);
        let (l, r): (Vec<u32>, Vec<u32>) = rows.iter().partition(|&&i| col[i as usize] <= best.threshold);
        debug_assert!(!l.is_empty() && !r.is_empty());
        let li = nodes.len();
        nodes.push(Node::Leaf { hist: Vec::new() });
        let ri = nodes.len();
        nodes.push(Node::Leaf { hist: Vec::new() });
        nodes[slot] = Node::Split { feature: best.feature, threshold: best.threshold, left: li, right: ri };
        // right pushed first so the left subtree is grown first
        stack.push((ri, r, depth + 1));
        stack.push((li, l, depth + 1));
    }
    DecisionTree { nodes }
}

fn uniform_or(weights: &Option<Vec<f64>>, k: usize) -> Vec<f64> {
    weights.clone().unwrap_or_else(|| vec![1.0; k])
}

fn check_labels(s: &Samples, n_classes: usize) -> Result<(), ForestError> {
    match s.y.iter().find(|&&l| l >= n_classes) {
        Some(&label) => Err(ForestError::InvalidLabel { label, n_classes }),
        None => Ok(()),
    }
}

/// One tree on all rows (no bootstrap), feature subsets drawn from `rng`.
pub fn train_tree(
    s: &Samples,
    n_classes: usize,
    class_weights: &[f64],
    mtry: usize,
    rng: &mut rng::Rng,
) -> Result<DecisionTree, ForestError> {
    check_labels(s, n_classes)?;
    if mtry == 0 || mtry > s.n_features {
        return Err(ForestError::InvalidConfig(format!("features_per_split {mtry} outside [1, {}]", s.n_features)));
    }
    let p = TreeParams { class_weights, n_classes, mtry, max_depth: None, min_samples_split: 2 };
    Ok(grow(&Columns::new(s), &vec![1; s.y.len()], &p, rng))
}

pub fn train_forest(s: &Samples, n_classes: usize, cfg: &ForestConfig) -> Result<RandomForest, ForestError> {
    cfg.validate(s.n_features, n_classes)?;
    check_labels(s, n_classes)?;
    if s.y.len() > u32::MAX as usize {
        return Err(ForestError::InvalidConfig("too many samples".into()));
    }
    let weights = uniform_or(&cfg.class_weights, n_classes);
    let p = TreeParams {
        class_weights: &weights,
        n_classes,
        mtry: cfg.mtry(s.n_features),
        max_depth: cfg.max_depth,
        min_samples_split: cfg.min_samples_split,
    };
    let cols = Columns::new(s);
    let n = s.y.len();
    let trees = (0..cfg.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut r = rng::stream(cfg.seed, rng::tag::FOREST_TREE + t as u64);
            let mut mult = vec![u32::from(!cfg.bootstrap); n];
            if cfg.bootstrap {
                for _ in 0..n {
                    mult[r.gen_range(0..n)] += 1;
                }
            }
            grow(&cols, &mult, &p, &mut r)
        })
        .collect();
    Ok(RandomForest { config: cfg.clone(), trees, n_classes, n_features: s.n_features })
}

fn argmax_low(v: &[f64]) -> usize {
    let mut best = 0;
    for j in 1..v.len() {
        if v[j] > v[best] {
            best = j;
        }
    }
    best
}

impl DecisionTree {
    pub fn leaf(&self, row: &[f64]) -> &[f64] {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Split { feature, threshold, left, right } => {
                    i = if row[*feature] <= *threshold { *left } else { *right };
                }
                Node::Leaf { hist } => return hist,
            }
        }
    }

    /// Weighted majority class of the leaf reached by `row`.
    pub fn vote(&self, row: &[f64]) -> usize {
        argmax_low(self.leaf(row))
    }

    pub fn depth(&self) -> usize {
        let mut best = 0;
        let mut stack = vec![(0usize, 0usize)];
        while let Some((i, d)) = stack.pop() {
            best = best.max(d);
            if let Node::Split { left, right, .. } = &self.nodes[i] {
                stack.push((*left, d + 1));
                stack.push((*right, d + 1));
            }
        }
        best
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForestPrediction {
    pub labels: Vec<usize>,
    /// Row-major `[n, n_classes]` fraction of trees voting for each class.
    pub vote_shares: Vec<f64>,
}

impl RandomForest {
    /// Plurality vote over trees, ties to the lower class index.
    pub fn predict(&self, x: &[f64], n_features: usize) -> Result<ForestPrediction, ForestError> {
        if n_features != self.n_features || !x.len().is_multiple_of(n_features) {
            return Err(ForestError::ShapeMismatch { expected: self.n_features, found: n_features });
        }
        let k = self.n_classes;
        let nt = self.trees.len() as f64;
        let shares: Vec<Vec<f64>> = x
            .par_chunks(n_features)
            .map(|row| {
                let mut votes = vec![0.0; k];
                for t in &self.trees {
                    votes[t.vote(row)] += 1.0;
                }
                votes.iter_mut().for_each(|v| *v /= nt);
                votes
            })
            .collect();
        Ok(ForestPrediction {
            labels: shares.iter().map(|v| argmax_low(v)).collect(),
            vote_shares: shares.concat(),
        })
    }

    pub fn predict_matrix(&self, m: &FeatureMatrix) -> Result<ForestPrediction, ForestError> {
        self.predict(&m.data, m.n_features())
    }

    pub fn to_text(&self) -> String {
        let c = &self.config;
        let mut out = String::new();
        let _ = writeln!(out, "#forest n_trees={} n_classes={} n_features={}", self.trees.len(), self.n_classes, self.n_features);
        let opt = |v: Option<usize>| v.map_or("none".to_string(), |x| x.to_string());
        let weights = c
            .class_weights
            .as_ref()
            .map_or("none".to_string(), |w| w.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","));
        let _ = writeln!(
            out,
            "#config max_depth={} min_samples_split={} features_per_split={} bootstrap={} seed={} class_weights={}",
            opt(c.max_depth),
            c.min_samples_split,
            opt(c.features_per_split),
            c.bootstrap,
            c.seed,
            weights
        );
        for (t, tree) in self.trees.iter().enumerate() {
            let _ = writeln!(out, "tree {t} nodes={}", tree.nodes.len());
            for node in &tree.nodes {
                match node {
                    Node::Split { feature, threshold, left, right } => {
                        let _ = writeln!(out, "S,{feature},{threshold},{left},{right}");
                    }
                    Node::Leaf { hist } => {
                        let h: Vec<String> = hist.iter().map(|v| v.to_string()).collect();
                        let _ = writeln!(out, "L,{}", h.join(","));
                    }
                }
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, ForestError> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let err = |line: usize, reason: &str| ForestError::Checkpoint { line, reason: reason.to_string() };
        let kv = |line: usize, l: &str, prefix: &str| -> Result<std::collections::HashMap<String, String>, ForestError> {
            let rest = l.strip_prefix(prefix).ok_or_else(|| err(line, &format!("expected `{prefix}`")))?;
            rest.split_whitespace()
                .map(|p| p.split_once('=').map(|(a, b)| (a.to_string(), b.to_string())).ok_or_else(|| err(line, "expected key=value")))
                .collect()
        };
        let (ln, l) = lines.next().ok_or_else(|| err(1, "empty checkpoint"))?;
        let head = kv(ln, l, "#forest")?;
        let num = |m: &std::collections::HashMap<String, String>, k: &str, line: usize| -> Result<usize, ForestError> {
            m.get(k).and_then(|v| v.parse().ok()).ok_or_else(|| err(line, &format!("missing or invalid `{k}`")))
        };
        let n_trees = num(&head, "n_trees", ln)?;
        let n_classes = num(&head, "n_classes", ln)?;
        let n_features = num(&head, "n_features", ln)?;
        let (ln, l) = lines.next().ok_or_else(|| err(2, "missing #config"))?;
        let cm = kv(ln, l, "#config")?;
        let get = |k: &str| cm.get(k).map(String::as_str).ok_or_else(|| err(ln, &format!("missing `{k}`")));
        let opt = |k: &str| -> Result<Option<usize>, ForestError> {
            match get(k)? {
                "none" => Ok(None),
                v => v.parse().map(Some).map_err(|_| err(ln, &format!("invalid `{k}`"))),
            }
        };
        let class_weights = match get("class_weights")? {
            "none" => None,
            v => Some(v.split(',').map(|x| x.parse()).collect::<Result<Vec<f64>, _>>().map_err(|_| err(ln, "invalid class_weights"))?),
        };
        let config = ForestConfig {
            n_trees,
            max_depth: opt("max_depth")?,
            min_samples_split: num(&cm, "min_samples_split", ln)?,
            features_per_split: opt("features_per_split")?,
            class_weights,
            bootstrap: get("bootstrap")? == "true",
            seed: get("seed")?.parse().map_err(|_| err(ln, "invalid seed"))?,
        };
        let mut trees = Vec::with_capacity(n_trees);
        for t in 0..n_trees {
            let (ln, l) = lines.next().ok_or_else(|| err(0, &format!("missing tree {t}")))?;
            let n_nodes: usize = l
                .strip_prefix(&format!("tree {t} nodes="))
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| err(ln, "expected tree header"))?;
            let mut nodes = Vec::with_capacity(n_nodes);
            for _ in 0..n_nodes {
                let (ln, l) = lines.next().ok_or_else(|| err(0, "truncated tree"))?;
                let f: Vec<&str> = l.split(',').collect();
                let node = match f[0] {
                    "S" if f.len() == 5 => {
                        let p = |i: usize| f[i].parse::<usize>().map_err(|_| err(ln, "invalid split node"));
                        let threshold = f[2].parse::<f64>().map_err(|_| err(ln, "invalid threshold"))?;
                        let (feature, left, right) = (p(1)?, p(3)?, p(4)?);
                        if feature >= n_features || left >= n_nodes || right >= n_nodes {
                            return Err(err(ln, "node index out of range"));
                        }
                        Node::Split { feature, threshold, left, right }
                    }
                    "L" if f.len() == n_classes + 1 => Node::Leaf {
                        hist: f[1..].iter().map(|v| v.parse()).collect::<Result<_, _>>().map_err(|_| err(ln, "invalid leaf"))?,
                    },
                    _ => return Err(err(ln, "unknown node record")),
                };
                nodes.push(node);
            }
            trees.push(DecisionTree { nodes });
        }
        if let Some((ln, _)) = lines.find(|(_, l)| !l.trim().is_empty()) {
            return Err(err(ln, "trailing content"));
        }
        Ok(Self { config, trees, n_classes, n_features })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ForestError> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|source| ForestError::Io { path: path.display().to_string(), source })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ForestError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ForestError::Io { path: path.display().to_string(), source })?;
        Self::from_text(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn random_data(n: usize, f: usize, k: usize, seed: u64) -> (Vec<f64>, Vec<usize>) {
        let mut r = rng::rng_from(seed);
        let x = (0..n * f).map(|_| r.gen_range(-1.0..1.0)).collect();
        let y = (0..n).map(|_| r.gen_range(0..k)).collect();
        (x, y)
    }

    #[test]
    fn gini_hand_value() {
        assert!((weighted_gini(&[2, 2], &[1.0, 3.0]) - 0.375).abs() < 1e-15);
        assert_eq!(weighted_gini(&[5, 0], &[1.0, 1.0]), 0.0);
        assert!((weighted_gini(&[3, 3], &[1.0, 1.0]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn separable_gives_depth_one() {
        let x = vec![0.1, 0.2, 0.3, 0.6, 0.7, 0.9];
        let y = vec![0, 0, 0, 1, 1, 1];
        let s = Samples::new(&x, 1, &y).unwrap();
        let t = train_tree(&s, 2, &[1.0, 1.0], 1, &mut rng::rng_from(0)).unwrap();
        assert_eq!(t.depth(), 1);
        match &t.nodes[0] {
            Node::Split { threshold, .. } => assert!(*threshold > 0.3 && *threshold < 0.6),
            _ => panic!("expected split"),
        }
    }

    #[test]
    fn pure_input_is_a_leaf() {
        let (x, _) = random_data(20, 3, 2, 1);
        let y = vec![1; 20];
        let s = Samples::new(&x, 3, &y).unwrap();
        let t = train_tree(&s, 2, &[1.0, 1.0], 1, &mut rng::rng_from(0)).unwrap();
        assert_eq!(t.nodes.len(), 1);
        assert!(Samples::new(&[], 3, &[]).is_err());
    }

    #[test]
    fn xor_is_fully_grown() {
        // no single split has positive gain at the root
        let x = vec![0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0];
        let y = vec![0, 1, 1, 0];
        let s = Samples::new(&x, 2, &y).unwrap();
        let cfg = ForestConfig { n_trees: 1, bootstrap: false, ..Default::default() };
        let f = train_forest(&s, 2, &cfg).unwrap();
        assert_eq!(f.predict(&x, 2).unwrap().labels, y);
    }

    #[test]
    fn training_accuracy_is_one_on_consistent_data() {
        let (x, y) = random_data(300, 6, 4, 3);
        let s = Samples::new(&x, 6, &y).unwrap();
        let cfg = ForestConfig { n_trees: 5, bootstrap: false, seed: 9, ..Default::default() };
        let f = train_forest(&s, 4, &cfg).unwrap();
        assert_eq!(f.predict(&x, 6).unwrap().labels, y);
        let weighted = ForestConfig { class_weights: Some(vec![1.0, 2.0, 0.5, 4.0]), ..cfg };
        let f = train_forest(&s, 4, &weighted).unwrap();
        assert_eq!(f.predict(&x, 6).unwrap().labels, y);
    }

    #[test]
    fn deterministic_and_thread_independent() {
        let (x, y) = random_data(200, 5, 3, 4);
        let s = Samples::new(&x, 5, &y).unwrap();
        let cfg = ForestConfig { n_trees: 12, seed: 2, ..Default::default() };
        let a = train_forest(&s, 3, &cfg).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| train_forest(&s, 3, &cfg).unwrap());
        assert_eq!(a, b);
        let c = train_forest(&s, 3, &ForestConfig { seed: 3, ..cfg }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn vote_rules() {
        let leaf = |h: Vec<f64>| DecisionTree { nodes: vec![Node::Leaf { hist: h }] };
        let f = RandomForest {
            config: ForestConfig { n_trees: 2, ..Default::default() },
            trees: vec![leaf(vec![1.0, 0.0]), leaf(vec![0.0, 1.0])],
            n_classes: 2,
            n_features: 1,
        };
        let p = f.predict(&[0.0], 1).unwrap();
        assert_eq!(p.labels, vec![0]);
        assert_eq!(p.vote_shares, vec![0.5, 0.5]);
        assert!(f.predict(&[0.0, 1.0], 2).is_err());
        let agree = RandomForest { trees: vec![leaf(vec![0.0, 3.0]); 3], ..f };
        assert_eq!(agree.predict(&[0.0, 5.0], 1).unwrap().labels, vec![1, 1]);
    }

    #[test]
    fn checkpoint_round_trip() {
        let (x, y) = random_data(100, 4, 3, 5);
        let s = Samples::new(&x, 4, &y).unwrap();
        let cfg = ForestConfig { n_trees: 4, class_weights: Some(vec![0.3, 1.0, 2.5]), max_depth: Some(6), ..Default::default() };
        let f = train_forest(&s, 3, &cfg).unwrap();
        let back = RandomForest::from_text(&f.to_text()).unwrap();
        assert_eq!(back, f);
        assert!(RandomForest::from_text("#forest n_trees=1 n_classes=2\n").is_err());
    }

    #[test]
    fn max_depth_is_respected() {
        let (x, y) = random_data(200, 3, 3, 6);
        let s = Samples::new(&x, 3, &y).unwrap();
        let f = train_forest(&s, 3, &ForestConfig { n_trees: 3, max_depth: Some(2), ..Default::default() }).unwrap();
        assert!(f.trees.iter().all(|t| t.depth() <= 2));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn monotone_rescaling_keeps_predictions(seed in 0u64..1000, col in 0usize..4, scale in 0.1f64..10.0, shift in -5.0f64..5.0) {
            // evaluated on training rows: midpoints between unseen values are not warp-invariant
            let (x, y) = random_data(80, 4, 3, seed);
            let g = |v: f64| (scale * v + shift).exp();
            let warp = |m: &[f64]| -> Vec<f64> {
                m.iter().enumerate().map(|(i, &v)| if i % 4 == col { g(v) } else { v }).collect()
            };
            let cfg = ForestConfig { n_trees: 5, seed, bootstrap: false, features_per_split: Some(2), max_depth: Some(4), ..Default::default() };
            let a = train_forest(&Samples::new(&x, 4, &y).unwrap(), 3, &cfg).unwrap();
            let xw = warp(&x);
            let b = train_forest(&Samples::new(&xw, 4, &y).unwrap(), 3, &cfg).unwrap();
            prop_assert_eq!(a.predict(&x, 4).unwrap(), b.predict(&xw, 4).unwrap());
        }
    }
}
