//! Minimal reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records each layer primitive as a node holding its forward
//! value plus whatever the backward pass needs. [`Graph::backward`] walks
//! the nodes in reverse creation order and accumulates gradients for every
//! node, leaves included. Each graph is single-threaded with a fixed
//! accumulation order, so gradients are bit-reproducible.
//!
//! Only the primitives needed by the MLP, TempCNN and LTAE networks are
//! provided; there is no broadcasting beyond what each op documents.

use std::fmt::Write as _;

use thiserror::Error;

/// Batch-norm epsilon.
pub const BN_EPS: f64 = 1e-5;
/// Weight of the current batch in running-statistics updates.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Error, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("label {label} out of range for {classes} classes")]
    InvalidLabel { label: usize, classes: usize },
    #[error("batch norm in train mode needs at least 2 samples per statistic, got {0}")]
    BatchTooSmall(usize),
    #[error("embedding size {embed} is not divisible by {heads} heads")]
    HeadsDivisibility { embed: usize, heads: usize },
    #[error("class weights must be positive for present labels")]
    InvalidWeights,
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
}

fn shape_err(op: &'static str, detail: impl Into<String>) -> AutodiffError {
    AutodiffError::Shape { op, detail: detail.into() }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "tensor data does not match shape {shape:?}");
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![value; n] }
    }

    pub fn scalar(v: f64) -> Self {
        Self { shape: vec![1], data: vec![v] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dims(&self) -> usize {
        self.shape.len()
    }
}

/// Row-wise softmax of a `[n, k]` tensor.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let k = *logits.shape.last().expect("non-empty shape");
    let mut out = logits.data.clone();
    for row in out.chunks_mut(k) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    Tensor::new(logits.shape.clone(), out)
}

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Batch moments from a train-mode batch norm, for running-stat updates.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchMoments {
    pub mean: Vec<f64>,
    /// Unbiased (n - 1) variance.
    pub var: Vec<f64>,
}

impl BatchMoments {
    /// `running <- (1 - momentum) * running + momentum * batch`.
    pub fn update_running(&self, running_mean: &mut [f64], running_var: &mut [f64]) {
        for (r, b) in running_mean.iter_mut().zip(&self.mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
        }
        for (r, b) in running_var.iter_mut().zip(&self.var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
        }
    }
}

enum Op {
    Leaf,
    Linear { x: Var, w: Var, b: Var },
    Conv1d { x: Var, w: Var, b: Var },
    TimeLinear { x: Var, w: Var, b: Var },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, train: bool },
    Relu { x: Var },
    MaxPool { x: Var, argmax: Vec<usize> },
    AddConst { x: Var },
    Attention { x: Var, wk: Var, bk: Var, q: Var, heads: usize, attn: Vec<f64>, keys: Vec<f64> },
    CrossEntropy { logits: Var, labels: Vec<usize>, row_weight: Vec<f64>, probs: Vec<f64> },
    DotConst { x: Var, c: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients of a scalar with respect to every node of a graph.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of `v`; zeros when `v` does not influence the output.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => Tensor::new(self.shapes[v.0].clone(), g.clone()),
            None => Tensor::zeros(self.shapes[v.0].clone()),
        }
    }

    pub fn take(&mut self, v: Var) -> Vec<f64> {
        let n = self.shapes[v.0].iter().product();
        self.grads[v.0].take().unwrap_or_else(|| vec![0.0; n])
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

// C = alpha * A(m x k) * B(k x n) + beta * C with arbitrary strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize, k: usize, n: usize,
    a: &[f64], rsa: isize, csa: isize,
    b: &[f64], rsb: isize, csb: isize,
    beta: f64,
    c: &mut [f64], rsc: isize, csc: isize,
) {
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: callers pass slices that cover every index reachable with the
    // given dimensions and strides; all strides are non-negative.
    unsafe {
        matrixmultiply::dgemm(m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), rsc, csc);
    }
}

fn add_into(acc: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match acc {
        Some(a) => a.iter_mut().zip(&g).for_each(|(x, y)| *x += y),
        None => *acc = Some(g),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    /// `y = x Wᵀ + b` for `x: [n, in]`, `W: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, AutodiffError> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 || xs[1] != ws[1] || bs[0] != ws[0] {
            return Err(shape_err("linear", format!("x {xs:?}, W {ws:?}, b {bs:?}")));
        }
        let (n, fin, fout) = (xs[0], xs[1], ws[0]);
        let mut y = vec![0.0; n * fout];
        for row in y.chunks_mut(fout) {
            row.copy_from_slice(&self.value(b).data);
        }
        gemm(n, fin, fout, &self.value(x).data, fin as isize, 1, &self.value(w).data, 1, fin as isize, 1.0, &mut y, fout as isize, 1);
        Ok(self.push(Tensor::new(vec![n, fout], y), Op::Linear { x, w, b }))
    }

    /// Same-length 1-D cross-correlation over time with zero padding
    /// (left `(k-1)/2`, right `k/2`), stride 1.
    /// `x: [n, c_in, t]`, `W: [c_out, c_in, k]`, `b: [c_out]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var, AutodiffError> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 3 || ws.len() != 3 || bs.len() != 1 || xs[1] != ws[1] || bs[0] != ws[0] {
            return Err(shape_err("conv1d", format!("x {xs:?}, W {ws:?}, b {bs:?}")));
        }
        let (n, cin, t, cout, k) = (xs[0], xs[1], xs[2], ws[0], ws[2]);
        if k == 0 || k > t {
            return Err(shape_err("conv1d", format!("kernel {k} vs length {t}")));
        }
        let xd = &self.value(x).data;
        let wd = &self.value(w).data;
        let bd = &self.value(b).data;
        let ck = cin * k;
        let mut y = vec![0.0; n * cout * t];
        let mut cols = vec![0.0; t * ck];
        for s in 0..n {
            im2col(&xd[s * cin * t..(s + 1) * cin * t], cin, t, k, &mut cols);
            let ys = &mut y[s * cout * t..(s + 1) * cout * t];
            for (o, row) in ys.chunks_mut(t).enumerate() {
                row.iter_mut().for_each(|v| *v = bd[o]);
            }
            // Y_s[t, o] = cols[t, :] · W[o, :], stored at ys[o * t + t']
            gemm(t, ck, cout, &cols, ck as isize, 1, wd, 1, ck as isize, 1.0, ys, 1, t as isize);
        }
        Ok(self.push(Tensor::new(vec![n, cout, t], y), Op::Conv1d { x, w, b }))
    }

    /// Per-timestep embedding `x: [n, c, t]` -> `[n, t, e]` with `W: [e, c]`, `b: [e]`.
    pub fn time_linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, AutodiffError> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 3 || ws.len() != 2 || bs.len() != 1 || xs[1] != ws[1] || bs[0] != ws[0] {
            return Err(shape_err("time_linear", format!("x {xs:?}, W {ws:?}, b {bs:?}")));
        }
        let (n, c, t, e) = (xs[0], xs[1], xs[2], ws[0]);
        let mut y = vec![0.0; n * t * e];
        for row in y.chunks_mut(e) {
            row.copy_from_slice(&self.value(b).data);
        }
        let (xd, wd) = (&self.value(x).data, &self.value(w).data);
        for s in 0..n {
            gemm(t, c, e, &xd[s * c * t..], 1, t as isize, wd, 1, c as isize, 1.0, &mut y[s * t * e..(s + 1) * t * e], e as isize, 1);
        }
        Ok(self.push(Tensor::new(vec![n, t, e], y), Op::TimeLinear { x, w, b }))
    }

    fn bn_groups(shape: &[usize]) -> Result<(usize, usize, usize), AutodiffError> {
        // (outer n, channels, inner t): element (i, c, j) at (i * ch + c) * inner + j
        match shape.len() {
            2 => Ok((shape[0], shape[1], 1)),
            3 => Ok((shape[0], shape[1], shape[2])),
            _ => Err(shape_err("batchnorm", format!("x {shape:?}"))),
        }
    }

    fn check_bn_params(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize), AutodiffError> {
        let (n, ch, inner) = Self::bn_groups(self.shape(x))?;
        if self.shape(gamma) != [ch] || self.shape(beta) != [ch] {
            return Err(shape_err("batchnorm", format!("x {:?}, gamma {:?}, beta {:?}", self.shape(x), self.shape(gamma), self.shape(beta))));
        }
        Ok((n, ch, inner))
    }

    /// Train-mode batch norm: per feature for `[n, f]`, per channel pooled
    /// over batch and time for `[n, c, t]`.
    pub fn batchnorm_train(&mut self, x: Var, gamma: Var, beta: Var) -> Result<(Var, BatchMoments), AutodiffError> {
        let (n, ch, inner) = self.check_bn_params(x, gamma, beta)?;
        if n < 2 {
            return Err(AutodiffError::BatchTooSmall(n));
        }
        let cnt = (n * inner) as f64;
        let xd = &self.value(x).data;
        let mut mean = vec![0.0; ch];
        for i in 0..n {
            for c in 0..ch {
                let base = (i * ch + c) * inner;
                mean[c] += xd[base..base + inner].iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= cnt);
        let mut var = vec![0.0; ch];
        for i in 0..n {
            for c in 0..ch {
                let base = (i * ch + c) * inner;
                var[c] += xd[base..base + inner].iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= cnt);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let (g, bt) = (&self.value(gamma).data, &self.value(beta).data);
        let mut xhat = vec![0.0; xd.len()];
        let mut y = vec![0.0; xd.len()];
        for i in 0..n {
            for c in 0..ch {
                let base = (i * ch + c) * inner;
                for j in base..base + inner {
                    xhat[j] = (xd[j] - mean[c]) * inv_std[c];
                    y[j] = g[c] * xhat[j] + bt[c];
                }
            }
        }
        let unbiased = cnt / (cnt - 1.0);
        let moments = BatchMoments { mean, var: var.iter().map(|v| v * unbiased).collect() };
        let shape = self.shape(x).to_vec();
        let v = self.push(Tensor::new(shape, y), Op::BatchNorm { x, gamma, beta, xhat, inv_std, train: true });
        Ok((v, moments))
    }

    /// Eval-mode batch norm with fixed statistics.
    pub fn batchnorm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[f64], var: &[f64]) -> Result<Var, AutodiffError> {
        let (n, ch, inner) = self.check_bn_params(x, gamma, beta)?;
        if mean.len() != ch || var.len() != ch {
            return Err(shape_err("batchnorm", "running statistics length"));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let xd = &self.value(x).data;
        let (g, bt) = (&self.value(gamma).data, &self.value(beta).data);
        let mut xhat = vec![0.0; xd.len()];
        let mut y = vec![0.0; xd.len()];
        for i in 0..n {
            for c in 0..ch {
                let base = (i * ch + c) * inner;
                for j in base..base + inner {
                    xhat[j] = (xd[j] - mean[c]) * inv_std[c];
                    y[j] = g[c] * xhat[j] + bt[c];
                }
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(Tensor::new(shape, y), Op::BatchNorm { x, gamma, beta, xhat, inv_std, train: false }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let y = Tensor::new(v.shape.clone(), v.data.iter().map(|&a| if a > 0.0 { a } else { 0.0 }).collect());
        self.push(y, Op::Relu { x })
    }

    /// Max over time, `[n, c, t]` -> `[n, c]`; ties go to the earliest step.
    pub fn global_max_pool(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let s = self.shape(x);
        if s.len() != 3 || s[2] == 0 {
            return Err(shape_err("global_max_pool", format!("x {s:?}")));
        }
        let (n, c, t) = (s[0], s[1], s[2]);
        let xd = &self.value(x).data;
        let mut y = Vec::with_capacity(n * c);
        let mut argmax = Vec::with_capacity(n * c);
        for row in xd.chunks(t) {
            let mut best = 0;
            for j in 1..t {
                if row[j] > row[best] {
                    best = j;
                }
            }
            y.push(row[best]);
            argmax.push(best);
        }
        Ok(self.push(Tensor::new(vec![n, c], y), Op::MaxPool { x, argmax }))
    }

    /// Adds a constant of shape `x.shape[1..]` to every batch row.
    pub fn add_const(&mut self, x: Var, c: &Tensor) -> Result<Var, AutodiffError> {
        let s = self.shape(x);
        if s.len() < 2 || s[1..] != c.shape[..] {
            return Err(shape_err("add_const", format!("x {s:?}, const {:?}", c.shape)));
        }
        let v = self.value(x);
        let y: Vec<f64> = v.data.chunks(c.len()).flat_map(|row| row.iter().zip(&c.data).map(|(a, b)| a + b)).collect();
        let shape = v.shape.clone();
        Ok(self.push(Tensor::new(shape, y), Op::AddConst { x }))
    }

    /// Multi-head attention with one learned master query per head.
    ///
    /// `x: [n, t, e]` is split into `heads` contiguous channel slices of
    /// width `e / heads`. Per head, keys are `wk[h] · slice_t + bk[h]`
    /// (`wk: [heads, d_k, e/heads]`, `bk: [heads, d_k]`), the attention
    /// weights are `softmax_t(q[h] · key_t / sqrt(d_k))` (`q: [heads, d_k]`),
    /// and the head output is the weighted sum of the input slices.
    /// Heads are concatenated into `[n, e]`.
    pub fn temporal_attention(&mut self, x: Var, wk: Var, bk: Var, q: Var) -> Result<Var, AutodiffError> {
        let xs = self.shape(x).to_vec();
        let wks = self.shape(wk).to_vec();
        if xs.len() != 3 || wks.len() != 3 {
            return Err(shape_err("temporal_attention", format!("x {xs:?}, wk {wks:?}")));
        }
        let (n, t, e) = (xs[0], xs[1], xs[2]);
        let (heads, dk, eh) = (wks[0], wks[1], wks[2]);
        if heads == 0 || e % heads != 0 {
            return Err(AutodiffError::HeadsDivisibility { embed: e, heads });
        }
        if eh != e / heads || self.shape(bk) != [heads, dk] || self.shape(q) != [heads, dk] || t == 0 {
            return Err(shape_err("temporal_attention", format!("x {xs:?}, wk {wks:?}, bk {:?}, q {:?}", self.shape(bk), self.shape(q))));
        }
        let scale = 1.0 / (dk as f64).sqrt();
        let (xd, wkd, bkd, qd) = (&self.value(x).data, &self.value(wk).data, &self.value(bk).data, &self.value(q).data);
        let mut attn = vec![0.0; n * heads * t];
        let mut keys = vec![0.0; n * heads * t * dk];
        let mut y = vec![0.0; n * e];
        let mut scores = vec![0.0; t];
        for s in 0..n {
            for h in 0..heads {
                let w_h = &wkd[h * dk * eh..(h + 1) * dk * eh];
                let q_h = &qd[h * dk..(h + 1) * dk];
                for ti in 0..t {
                    let slice = &xd[(s * t + ti) * e + h * eh..(s * t + ti) * e + (h + 1) * eh];
                    let kbase = ((s * heads + h) * t + ti) * dk;
                    let mut score = 0.0;
                    for d in 0..dk {
                        let kv = bkd[h * dk + d] + w_h[d * eh..(d + 1) * eh].iter().zip(slice).map(|(a, b)| a * b).sum::<f64>();
                        keys[kbase + d] = kv;
                        score += q_h[d] * kv;
                    }
                    scores[ti] = score * scale;
                }
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let a = &mut attn[(s * heads + h) * t..(s * heads + h + 1) * t];
                let mut z = 0.0;
                for ti in 0..t {
                    a[ti] = (scores[ti] - m).exp();
                    z += a[ti];
                }
                a.iter_mut().for_each(|v| *v /= z);
                let out = &mut y[s * e + h * eh..s * e + (h + 1) * eh];
                for ti in 0..t {
                    let slice = &xd[(s * t + ti) * e + h * eh..(s * t + ti) * e + (h + 1) * eh];
                    for (o, v) in out.iter_mut().zip(slice) {
                        *o += a[ti] * v;
                    }
                }
            }
        }
        Ok(self.push(Tensor::new(vec![n, e], y), Op::Attention { x, wk, bk, q, heads, attn, keys }))
    }

    /// Attention weights of a [`Graph::temporal_attention`] node, `[n, heads, t]`.
    pub fn attention_weights(&self, v: Var) -> Option<Tensor> {
        match &self.nodes[v.0].op {
            Op::Attention { x, heads, attn, .. } => {
                let s = self.shape(*x);
                Some(Tensor::new(vec![s[0], *heads, s[1]], attn.clone()))
            }
            _ => None,
        }
    }

    /// `Σ_i w[y_i] · (−log softmax(z_i)[y_i]) / Σ_i w[y_i]`, via log-sum-exp.
    pub fn weighted_cross_entropy(&mut self, logits: Var, labels: &[usize], class_weights: &[f64]) -> Result<Var, AutodiffError> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != labels.len() || s[1] != class_weights.len() {
            return Err(shape_err("weighted_cross_entropy", format!("logits {s:?}, {} labels, {} weights", labels.len(), class_weights.len())));
        }
        let k = s[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(AutodiffError::InvalidLabel { label: bad, classes: k });
        }
        let row_weight: Vec<f64> = labels.iter().map(|&l| class_weights[l]).collect();
        let total: f64 = row_weight.iter().sum();
        if row_weight.iter().any(|w| !(*w > 0.0) || !w.is_finite()) || !(total > 0.0) {
            return Err(AutodiffError::InvalidWeights);
        }
        let zd = &self.value(logits).data;
        let mut probs = vec![0.0; zd.len()];
        let mut loss = 0.0;
        for (i, row) in zd.chunks(k).enumerate() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - m).exp()).sum();
            let lse = m + sum.ln();
            for j in 0..k {
                probs[i * k + j] = (row[j] - lse).exp();
            }
            loss += row_weight[i] * (lse - row[labels[i]]);
        }
        let rw: Vec<f64> = row_weight.iter().map(|w| w / total).collect();
        Ok(self.push(Tensor::scalar(loss / total), Op::CrossEntropy { logits, labels: labels.to_vec(), row_weight: rw, probs }))
    }

    /// `Σ x ⊙ c`: projects a tensor to a scalar (gradient checks).
    pub fn dot_const(&mut self, x: Var, c: &Tensor) -> Result<Var, AutodiffError> {
        if self.value(x).len() != c.len() {
            return Err(shape_err("dot_const", format!("x {:?}, c {:?}", self.shape(x), c.shape)));
        }
        let s = self.value(x).data.iter().zip(&c.data).map(|(a, b)| a * b).sum();
        Ok(self.push(Tensor::scalar(s), Op::DotConst { x, c: c.data.clone() }))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.value(output).len(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(vec![1.0]);
        for i in (0..=output.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            self.backprop_node(i, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        Gradients { grads, shapes: self.nodes.iter().map(|n| n.value.shape.clone()).collect() }
    }

    fn backprop_node(&self, i: usize, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let (n, fin) = (xv.shape[0], xv.shape[1]);
                let fout = self.shape(*w)[0];
                let wd = &self.value(*w).data;
                let mut dx = vec![0.0; n * fin];
                gemm(n, fout, fin, gy, fout as isize, 1, wd, fin as isize, 1, 0.0, &mut dx, fin as isize, 1);
                let mut dw = vec![0.0; fout * fin];
                gemm(fout, n, fin, gy, 1, fout as isize, &xv.data, fin as isize, 1, 0.0, &mut dw, fin as isize, 1);
                let mut db = vec![0.0; fout];
                for row in gy.chunks(fout) {
                    db.iter_mut().zip(row).for_each(|(a, g)| *a += g);
                }
                add_into(&mut grads[x.0], dx);
                add_into(&mut grads[w.0], dw);
                add_into(&mut grads[b.0], db);
            }
            Op::Conv1d { x, w, b } => {
                let xs = self.shape(*x);
                let (n, cin, t) = (xs[0], xs[1], xs[2]);
                let ws = self.shape(*w);
                let (cout, k) = (ws[0], ws[2]);
                let ck = cin * k;
                let (xd, wd) = (&self.value(*x).data, &self.value(*w).data);
                let mut cols = vec![0.0; t * ck];
                let mut dcols = vec![0.0; t * ck];
                let mut dx = vec![0.0; n * cin * t];
                let mut dw = vec![0.0; cout * ck];
                let mut db = vec![0.0; cout];
                for s in 0..n {
                    let gs = &gy[s * cout * t..(s + 1) * cout * t];
                    for (o, row) in gs.chunks(t).enumerate() {
                        db[o] += row.iter().sum::<f64>();
                    }
                    im2col(&xd[s * cin * t..(s + 1) * cin * t], cin, t, k, &mut cols);
                    // dW[o, :] += Σ_t dY[t, o] cols[t, :]
                    gemm(cout, t, ck, gs, t as isize, 1, &cols, ck as isize, 1, 1.0, &mut dw, ck as isize, 1);
                    // dcols[t, :] = Σ_o dY[t, o] W[o, :]
                    gemm(t, cout, ck, gs, 1, t as isize, wd, ck as isize, 1, 0.0, &mut dcols, ck as isize, 1);
                    col2im(&dcols, cin, t, k, &mut dx[s * cin * t..(s + 1) * cin * t]);
                }
                add_into(&mut grads[x.0], dx);
                add_into(&mut grads[w.0], dw);
                add_into(&mut grads[b.0], db);
            }
            Op::TimeLinear { x, w, b } => {
                let xs = self.shape(*x);
                let (n, c, t) = (xs[0], xs[1], xs[2]);
                let e = self.shape(*w)[0];
                let (xd, wd) = (&self.value(*x).data, &self.value(*w).data);
                let mut dx = vec![0.0; n * c * t];
                let mut dw = vec![0.0; e * c];
                let mut db = vec![0.0; e];
                for row in gy.chunks(e) {
                    db.iter_mut().zip(row).for_each(|(a, g)| *a += g);
                }
                for s in 0..n {
                    let gs = &gy[s * t * e..(s + 1) * t * e];
                    // dXᵀ[t, c] = Σ_e dY[t, e] W[e, c]
                    gemm(t, e, c, gs, e as isize, 1, wd, c as isize, 1, 0.0, &mut dx[s * c * t..(s + 1) * c * t], 1, t as isize);
                    // dW[e, c] += Σ_t dY[t, e] x[c, t]
                    gemm(e, t, c, gs, 1, e as isize, &xd[s * c * t..], 1, t as isize, 1.0, &mut dw, c as isize, 1);
                }
                add_into(&mut grads[x.0], dx);
                add_into(&mut grads[w.0], dw);
                add_into(&mut grads[b.0], db);
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                let (n, ch, inner) = Self::bn_groups(self.shape(*x)).expect("checked in forward");
                let g = &self.value(*gamma).data;
                let mut dgamma = vec![0.0; ch];
                let mut dbeta = vec![0.0; ch];
                for i in 0..n {
                    for c in 0..ch {
                        let base = (i * ch + c) * inner;
                        for j in base..base + inner {
                            dgamma[c] += gy[j] * xhat[j];
                            dbeta[c] += gy[j];
                        }
                    }
                }
                let mut dx = vec![0.0; gy.len()];
                if *train {
                    let cnt = (n * inner) as f64;
                    for i in 0..n {
                        for c in 0..ch {
                            let base = (i * ch + c) * inner;
                            let k = g[c] * inv_std[c] / cnt;
                            for j in base..base + inner {
                                dx[j] = k * (cnt * gy[j] - dbeta[c] - xhat[j] * dgamma[c]);
                            }
                        }
                    }
                } else {
                    for i in 0..n {
                        for c in 0..ch {
                            let base = (i * ch + c) * inner;
                            for j in base..base + inner {
                                dx[j] = gy[j] * g[c] * inv_std[c];
                            }
                        }
                    }
                }
                add_into(&mut grads[x.0], dx);
                add_into(&mut grads[gamma.0], dgamma);
                add_into(&mut grads[beta.0], dbeta);
            }
            Op::Relu { x } => {
                let xd = &self.value(*x).data;
                let dx = xd.iter().zip(gy).map(|(&a, &g)| if a > 0.0 { g } else { 0.0 }).collect();
                add_into(&mut grads[x.0], dx);
            }
            Op::MaxPool { x, argmax } => {
                let t = self.shape(*x)[2];
                let mut dx = vec![0.0; self.value(*x).len()];
                for (r, (&a, &g)) in argmax.iter().zip(gy).enumerate() {
                    dx[r * t + a] = g;
                }
                add_into(&mut grads[x.0], dx);
            }
            Op::AddConst { x } => add_into(&mut grads[x.0], gy.to_vec()),
            Op::Attention { x, wk, bk, q, heads, attn, keys } => {
                let xs = self.shape(*x);
                let (n, t, e) = (xs[0], xs[1], xs[2]);
                let heads = *heads;
                let eh = e / heads;
                let dk = self.shape(*q)[1];
                let scale = 1.0 / (dk as f64).sqrt();
                let (xd, wkd, qd) = (&self.value(*x).data, &self.value(*wk).data, &self.value(*q).data);
                let mut dx = vec![0.0; n * t * e];
                let mut dwk = vec![0.0; heads * dk * eh];
                let mut dbk = vec![0.0; heads * dk];
                let mut dq = vec![0.0; heads * dk];
                let mut da = vec![0.0; t];
                let mut dkey = vec![0.0; dk];
                for s in 0..n {
                    for h in 0..heads {
                        let go = &gy[s * e + h * eh..s * e + (h + 1) * eh];
                        let a = &attn[(s * heads + h) * t..(s * heads + h + 1) * t];
                        let mut dot = 0.0;
                        for ti in 0..t {
                            let off = (s * t + ti) * e + h * eh;
                            let slice = &xd[off..off + eh];
                            da[ti] = go.iter().zip(slice).map(|(g, v)| g * v).sum();
                            dot += a[ti] * da[ti];
                            for (d, g) in dx[off..off + eh].iter_mut().zip(go) {
                                *d += a[ti] * g;
                            }
                        }
                        let q_h = &qd[h * dk..(h + 1) * dk];
                        let w_h = &wkd[h * dk * eh..(h + 1) * dk * eh];
                        for ti in 0..t {
                            let ds = a[ti] * (da[ti] - dot) * scale;
                            if ds == 0.0 {
                                continue;
                            }
                            let off = (s * t + ti) * e + h * eh;
                            let kbase = ((s * heads + h) * t + ti) * dk;
                            for d in 0..dk {
                                dq[h * dk + d] += ds * keys[kbase + d];
                                dkey[d] = ds * q_h[d];
                                dbk[h * dk + d] += dkey[d];
                            }
                            for d in 0..dk {
                                let wrow = &w_h[d * eh..(d + 1) * eh];
                                let dwrow = &mut dwk[(h * dk + d) * eh..(h * dk + d + 1) * eh];
                                for j in 0..eh {
                                    dwrow[j] += dkey[d] * xd[off + j];
                                    dx[off + j] += dkey[d] * wrow[j];
                                }
                            }
                        }
                    }
                }
                add_into(&mut grads[x.0], dx);
                add_into(&mut grads[wk.0], dwk);
                add_into(&mut grads[bk.0], dbk);
                add_into(&mut grads[q.0], dq);
            }
            Op::CrossEntropy { logits, labels, row_weight, probs } => {
                let k = self.shape(*logits)[1];
                let g = gy[0];
                let mut dz = probs.clone();
                for (i, row) in dz.chunks_mut(k).enumerate() {
                    row[labels[i]] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= row_weight[i] * g);
                }
                add_into(&mut grads[logits.0], dz);
            }
            Op::DotConst { x, c } => {
                let g = gy[0];
                add_into(&mut grads[x.0], c.iter().map(|v| v * g).collect());
            }
        }
    }
}

fn im2col(x: &[f64], cin: usize, t: usize, k: usize, cols: &mut [f64]) {
    let pad = (k - 1) / 2;
    let ck = cin * k;
    for ti in 0..t {
        let row = &mut cols[ti * ck..(ti + 1) * ck];
        for c in 0..cin {
            for j in 0..k {
                let src = ti as isize + j as isize - pad as isize;
                row[c * k + j] = if src >= 0 && (src as usize) < t { x[c * t + src as usize] } else { 0.0 };
            }
        }
    }
}

fn col2im(dcols: &[f64], cin: usize, t: usize, k: usize, dx: &mut [f64]) {
    let pad = (k - 1) / 2;
    let ck = cin * k;
    for ti in 0..t {
        let row = &dcols[ti * ck..(ti + 1) * ck];
        for c in 0..cin {
            for j in 0..k {
                let src = ti as isize + j as isize - pad as isize;
                if src >= 0 && (src as usize) < t {
                    dx[c * t + src as usize] += row[c * k + j];
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

/// Named learnable tensors plus non-learnable buffers (running statistics).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    params: Vec<(String, Tensor)>,
    buffers: Vec<(String, Tensor)>,
}

/// Index of a learnable parameter in a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

/// Index of a buffer in a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BufferId(pub usize);

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    fn assert_unique(&self, name: &str) {
        assert!(
            !self.params.iter().chain(&self.buffers).any(|(n, _)| n == name),
            "duplicate parameter name `{name}`"
        );
    }

    pub fn add_param(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        let name = name.into();
        self.assert_unique(&name);
        self.params.push((name, t));
        ParamId(self.params.len() - 1)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, t: Tensor) -> BufferId {
        let name = name.into();
        self.assert_unique(&name);
        self.buffers.push((name, t));
        BufferId(self.buffers.len() - 1)
    }

    pub fn param(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].1
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].1
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor {
        &self.buffers[id.0].1
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Tensor {
        &mut self.buffers[id.0].1
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.params.iter_mut().map(|(_, t)| t)
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.buffers.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    /// Number of learnable scalars (buffers excluded).
    pub fn learnable_count(&self) -> usize {
        self.params.iter().map(|(_, t)| t.len()).sum()
    }

    /// Text manifest: one `param|buffer <name> <d1>x<d2>...` line per tensor,
    /// in blob order.
    pub fn manifest(&self) -> String {
        let mut out = String::new();
        for (kind, list) in [("param", &self.params), ("buffer", &self.buffers)] {
            for (name, t) in list.iter() {
                let dims: Vec<String> = t.shape.iter().map(|d| d.to_string()).collect();
                let _ = writeln!(out, "{kind} {name} {}", dims.join("x"));
            }
        }
        out
    }

    /// Little-endian f64 values of every tensor in manifest order.
    pub fn blob(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 * (self.learnable_count() + self.buffers.iter().map(|(_, t)| t.len()).sum::<usize>()));
        for (_, t) in self.params.iter().chain(&self.buffers) {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_manifest(manifest: &str, blob: &[u8]) -> Result<Self, AutodiffError> {
        let bad = |m: String| AutodiffError::Checkpoint(m);
        let mut set = ParamSet::new();
        let mut offset = 0usize;
        for line in manifest.lines().filter(|l| !l.trim().is_empty()) {
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 3 {
                return Err(bad(format!("manifest line `{line}`")));
            }
            let shape: Vec<usize> = parts[2]
                .split('x')
                .map(|d| d.parse::<usize>())
                .collect::<Result<_, _>>()
                .map_err(|_| bad(format!("shape `{}`", parts[2])))?;
            let n: usize = shape.iter().product();
            let end = offset + 8 * n;
            if end > blob.len() {
                return Err(bad("parameter blob is truncated".into()));
            }
            let data = blob[offset..end].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            offset = end;
            let name = parts[1].to_string();
            if set.params.iter().chain(&set.buffers).any(|(n, _)| *n == name) {
                return Err(bad(format!("duplicate name `{name}`")));
            }
            let t = Tensor::new(shape, data);
            match parts[0] {
                "param" => set.params.push((name, t)),
                "buffer" => set.buffers.push((name, t)),
                other => return Err(bad(format!("unknown kind `{other}`"))),
            }
        }
        if offset != blob.len() {
            return Err(bad(format!("{} trailing bytes in parameter blob", blob.len() - offset)));
        }
        Ok(set)
    }
}

// ---------------------------------------------------------------------------
// Finite-difference checking
// ---------------------------------------------------------------------------

/// Reverse-mode gradients of the scalar built by `f` over leaf `inputs`.
pub fn analytic_gradients<F>(inputs: &[Tensor], mut f: F) -> Result<(f64, Vec<Tensor>), AutodiffError>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var, AutodiffError>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let value = g.value(out).data[0];
    let grads = g.backward(out);
    Ok((value, vars.iter().map(|&v| grads.get(v)).collect()))
}

/// Central differences with step `1e-5 · max(1, |x|)` per coordinate.
pub fn numeric_gradients<F>(inputs: &[Tensor], mut f: F) -> Result<Vec<Tensor>, AutodiffError>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var, AutodiffError>,
{
    let mut eval = |xs: &[Tensor]| -> Result<f64, AutodiffError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).data[0])
    };
    let mut work = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut grad = vec![0.0; inputs[i].len()];
        for j in 0..inputs[i].len() {
            let x0 = inputs[i].data[j];
            let h = 1e-5 * x0.abs().max(1.0);
            work[i].data[j] = x0 + h;
            let up = eval(&work)?;
            work[i].data[j] = x0 - h;
            let down = eval(&work)?;
            work[i].data[j] = x0;
            grad[j] = (up - down) / (2.0 * h);
        }
        out.push(Tensor::new(inputs[i].shape.clone(), grad));
    }
    Ok(out)
}

/// Scale floor of the relative error, so exactly-zero gradients compare on
/// an absolute scale.
pub const REL_ERROR_FLOOR: f64 = 1e-3;

/// Worst `|a − n| / max(|a|, |n|, REL_ERROR_FLOOR)` over all coordinates.
pub fn max_relative_error(analytic: &[Tensor], numeric: &[Tensor]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .flat_map(|(a, n)| a.data.iter().zip(&n.data))
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(REL_ERROR_FLOOR))
        .fold(0.0, f64::max)
}

/// Compares reverse-mode gradients with central differences; returns the
/// worst relative error over every input coordinate.
pub fn finite_diff_check<F>(inputs: &[Tensor], mut f: F) -> Result<f64, AutodiffError>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var, AutodiffError>,
{
    let (_, analytic) = analytic_gradients(inputs, &mut f)?;
    let numeric = numeric_gradients(inputs, &mut f)?;
    Ok(max_relative_error(&analytic, &numeric))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rand_tensor(shape: Vec<usize>, seed: u64) -> Tensor {
        let mut r = crate::rng::rng_from(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| r.gen_range(-1.0..1.0)).collect())
    }

    fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::new(shape, data)
    }

    #[test]
    fn linear_hand_arithmetic_and_identity() {
        let mut g = Graph::new();
        let x = g.leaf(t(vec![1, 2], vec![1.0, 2.0]));
        let w = g.leaf(t(vec![1, 2], vec![1.0, 1.0]));
        let b = g.leaf(t(vec![1], vec![0.5]));
        let y = g.linear(x, w, b).unwrap();
        assert_eq!(g.value(y).data, vec![3.5]);

        let xr = rand_tensor(vec![3, 4], 1);
        let x = g.leaf(xr.clone());
        let mut eye = Tensor::zeros(vec![4, 4]);
        (0..4).for_each(|i| eye.data[i * 4 + i] = 1.0);
        let w = g.leaf(eye);
        let b = g.leaf(Tensor::zeros(vec![4]));
        let y = g.linear(x, w, b).unwrap();
        assert_eq!(g.value(y), &xr);

        let bad = g.leaf(Tensor::zeros(vec![3, 5]));
        assert!(matches!(g.linear(x, bad, b), Err(AutodiffError::Shape { .. })));
    }

    #[test]
    fn conv1d_identity_and_hand_arithmetic() {
        let mut g = Graph::new();
        let xr = rand_tensor(vec![2, 1, 6], 2);
        let x = g.leaf(xr.clone());
        let w = g.leaf(t(vec![1, 1, 3], vec![0.0, 1.0, 0.0]));
        let b = g.leaf(Tensor::zeros(vec![1]));
        let y = g.conv1d(x, w, b).unwrap();
        assert_eq!(g.value(y), &xr);

        let x = g.leaf(t(vec![1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]));
        let w = g.leaf(t(vec![1, 1, 3], vec![1.0, 0.0, -1.0]));
        let y = g.conv1d(x, w, b).unwrap();
        // padded [0,1,2,3,4,0]: outputs [-2,-2,-2,3]; interior positions 2,3
        assert_eq!(g.value(y).data, vec![-2.0, -2.0, -2.0, 3.0]);

        let big = g.leaf(Tensor::zeros(vec![1, 1, 5]));
        assert!(g.conv1d(x, big, b).is_err());
    }

    #[test]
    fn conv1d_even_kernel_pads_right() {
        let mut g = Graph::new();
        let x = g.leaf(t(vec![1, 1, 3], vec![1.0, 2.0, 3.0]));
        let w = g.leaf(t(vec![1, 1, 2], vec![1.0, 10.0]));
        let b = g.leaf(Tensor::zeros(vec![1]));
        let y = g.conv1d(x, w, b).unwrap();
        assert_eq!(g.value(y).data, vec![21.0, 32.0, 3.0]);
    }

    #[test]
    fn batchnorm_train_normalizes() {
        let mut g = Graph::new();
        let x = g.leaf(t(vec![2, 1], vec![1.0, 3.0]));
        let gamma = g.leaf(Tensor::filled(vec![1], 1.0));
        let beta = g.leaf(Tensor::zeros(vec![1]));
        let (y, m) = g.batchnorm_train(x, gamma, beta).unwrap();
        let d = &g.value(y).data;
        assert!((d[0] + 1.0).abs() < 1e-5 && (d[1] - 1.0).abs() < 1e-5);
        assert_eq!(m.mean, vec![2.0]);
        assert_eq!(m.var, vec![2.0]);

        let single = g.leaf(t(vec![1, 1], vec![1.0]));
        assert_eq!(g.batchnorm_train(single, gamma, beta).unwrap_err(), AutodiffError::BatchTooSmall(1));
    }

    #[test]
    fn batchnorm_inverse_transform_and_moments() {
        let xr = rand_tensor(vec![16, 5], 3);
        let mut g = Graph::new();
        let x = g.leaf(xr.clone());
        let one = g.leaf(Tensor::filled(vec![5], 1.0));
        let zero = g.leaf(Tensor::zeros(vec![5]));
        let (y, m) = g.batchnorm_train(x, one, zero).unwrap();
        let yd = g.value(y).data.clone();
        for c in 0..5 {
            let col: Vec<f64> = (0..16).map(|i| yd[i * 5 + c]).collect();
            let mean = col.iter().sum::<f64>() / 16.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-6 && (var - 1.0).abs() < 1e-3, "{mean} {var}");
            let raw_var = m.var[c] * 15.0 / 16.0;
            assert!((var - raw_var / (raw_var + BN_EPS)).abs() < 1e-9);
        }
        let sigma: Vec<f64> = m.var.iter().map(|v| (v * 15.0 / 16.0 + BN_EPS).sqrt()).collect();
        let gamma = g.leaf(t(vec![5], sigma));
        let beta = g.leaf(t(vec![5], m.mean.clone()));
        let (y2, _) = g.batchnorm_train(x, gamma, beta).unwrap();
        for (a, b) in g.value(y2).data.iter().zip(&xr.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn batchnorm_channels_pool_over_time() {
        let xr = rand_tensor(vec![3, 2, 4], 4);
        let mut g = Graph::new();
        let x = g.leaf(xr);
        let one = g.leaf(Tensor::filled(vec![2], 1.0));
        let zero = g.leaf(Tensor::zeros(vec![2]));
        let (y, _) = g.batchnorm_train(x, one, zero).unwrap();
        let yd = &g.value(y).data;
        for c in 0..2 {
            let vals: Vec<f64> = (0..3).flat_map(|i| (0..4).map(move |j| (i, j))).map(|(i, j)| yd[(i * 2 + c) * 4 + j]).collect();
            let mean = vals.iter().sum::<f64>() / 12.0;
            assert!(mean.abs() < 1e-12);
        }
    }

    #[test]
    fn batchnorm_eval_uses_running_stats() {
        let mut g = Graph::new();
        let x = g.leaf(t(vec![1, 2], vec![3.0, 3.0]));
        let one = g.leaf(Tensor::filled(vec![2], 1.0));
        let zero = g.leaf(Tensor::zeros(vec![2]));
        let y = g.batchnorm_eval(x, one, zero, &[1.0, 3.0], &[4.0, 1.0]).unwrap();
        let d = &g.value(y).data;
        assert!((d[0] - 2.0 / (4.0 + BN_EPS).sqrt()).abs() < 1e-15);
        assert_eq!(d[1], 0.0);
    }

    #[test]
    fn running_stats_momentum() {
        let m = BatchMoments { mean: vec![1.0], var: vec![3.0] };
        let (mut rm, mut rv) = (vec![0.0], vec![1.0]);
        m.update_running(&mut rm, &mut rv);
        assert!((rm[0] - 0.1).abs() < 1e-15 && (rv[0] - 1.2).abs() < 1e-15);
    }

    #[test]
    fn relu_forward_and_mask() {
        let mut g = Graph::new();
        let x = g.leaf(t(vec![3], vec![-1.0, 0.0, 2.0]));
        let y = g.relu(x);
        assert_eq!(g.value(y).data, vec![0.0, 0.0, 2.0]);
        let c = Tensor::filled(vec![3], 1.0);
        let s = g.dot_const(y, &c).unwrap();
        assert_eq!(g.backward(s).get(x).data, vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn max_pool_forward_and_tie_routing() {
        let mut g = Graph::new();
        let x = g.leaf(t(vec![1, 2, 3], vec![1.0, 5.0, 2.0, 0.0, -1.0, 3.0]));
        let y = g.global_max_pool(x).unwrap();
        assert_eq!(g.value(y).data, vec![5.0, 3.0]);
        let x = g.leaf(t(vec![1, 1, 3], vec![4.0, 4.0, 4.0]));
        let y = g.global_max_pool(x).unwrap();
        assert_eq!(g.value(y).data, vec![4.0]);
        let s = g.dot_const(y, &Tensor::scalar(1.0)).unwrap();
        assert_eq!(g.backward(s).get(x).data, vec![1.0, 0.0, 0.0]);
    }

    fn attention_inputs(n: usize, t_: usize, e: usize, heads: usize, dk: usize, seed: u64) -> Vec<Tensor> {
        vec![
            rand_tensor(vec![n, t_, e], seed),
            rand_tensor(vec![heads, dk, e / heads], seed + 1),
            rand_tensor(vec![heads, dk], seed + 2),
            rand_tensor(vec![heads, dk], seed + 3),
        ]
    }

    #[test]
    fn attention_single_step_and_constant_sequence() {
        let ins = attention_inputs(2, 1, 6, 2, 3, 5);
        let mut g = Graph::new();
        let v: Vec<Var> = ins.iter().map(|t| g.leaf(t.clone())).collect();
        let y = g.temporal_attention(v[0], v[1], v[2], v[3]).unwrap();
        for (a, b) in g.value(y).data.iter().zip(&ins[0].data) {
            assert!((a - b).abs() < 1e-15);
        }

        let step: Vec<f64> = (0..6).map(|i| i as f64 * 0.3 - 0.7).collect();
        let x = t(vec![1, 4, 6], step.repeat(4));
        let mut g = Graph::new();
        let xv = g.leaf(x);
        let rest: Vec<Var> = ins[1..].iter().map(|t| g.leaf(t.clone())).collect();
        let y = g.temporal_attention(xv, rest[0], rest[1], rest[2]).unwrap();
        for (a, b) in g.value(y).data.iter().zip(&step) {
            assert!((a - b).abs() < 1e-12);
        }
        let w = g.attention_weights(y).unwrap();
        for row in w.data.chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_rejects_indivisible_heads() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(vec![1, 2, 7]));
        let wk = g.leaf(Tensor::zeros(vec![2, 3, 3]));
        let bk = g.leaf(Tensor::zeros(vec![2, 3]));
        let q = g.leaf(Tensor::zeros(vec![2, 3]));
        assert_eq!(g.temporal_attention(x, wk, bk, q).unwrap_err(), AutodiffError::HeadsDivisibility { embed: 7, heads: 2 });
    }

    #[test]
    fn cross_entropy_values() {
        let mut g = Graph::new();
        let z = g.leaf(Tensor::zeros(vec![3, 4]));
        let l = g.weighted_cross_entropy(z, &[0, 1, 3], &[1.0; 4]).unwrap();
        assert!((g.value(l).data[0] - 4f64.ln()).abs() < 1e-15);

        let z = g.leaf(t(vec![1, 2], vec![700.0, -700.0]));
        let l = g.weighted_cross_entropy(z, &[0], &[1.0, 1.0]).unwrap();
        assert!(g.value(l).data[0].abs() < 1e-300);
        let l = g.weighted_cross_entropy(z, &[1], &[1.0, 1.0]).unwrap();
        assert!((g.value(l).data[0] - 1400.0).abs() < 1e-9);

        // weighted mean of per-row losses with w = {1, 9}
        let logits = vec![0.3, -0.2, 1.1, 0.4];
        let z = g.leaf(t(vec![2, 2], logits.clone()));
        let l = g.weighted_cross_entropy(z, &[0, 1], &[1.0, 9.0]).unwrap();
        let nll = |a: f64, b: f64, y: usize| {
            let lse = (a.exp() + b.exp()).ln();
            lse - if y == 0 { a } else { b }
        };
        let expect = (1.0 * nll(0.3, -0.2, 0) + 9.0 * nll(1.1, 0.4, 1)) / 10.0;
        assert!((g.value(l).data[0] - expect).abs() < 1e-14);

        assert_eq!(g.weighted_cross_entropy(z, &[0, 2], &[1.0, 1.0]).unwrap_err(), AutodiffError::InvalidLabel { label: 2, classes: 2 });
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let s = softmax_rows(&rand_tensor(vec![7, 5], 9));
        for row in s.data.chunks(5) {
            assert!(row.iter().all(|&p| p > 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn finite_differences_linear() {
        let ins = vec![rand_tensor(vec![4, 7], 10), rand_tensor(vec![3, 7], 11), rand_tensor(vec![3], 12)];
        let proj = rand_tensor(vec![4, 3], 13);
        let err = finite_diff_check(&ins, |g, v| {
            let y = g.linear(v[0], v[1], v[2])?;
            g.dot_const(y, &proj)
        })
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn finite_differences_conv1d() {
        for k in [2usize, 3] {
            let ins = vec![rand_tensor(vec![2, 3, 9], 20), rand_tensor(vec![4, 3, k], 21), rand_tensor(vec![4], 22)];
            let proj = rand_tensor(vec![2, 4, 9], 23);
            let err = finite_diff_check(&ins, |g, v| {
                let y = g.conv1d(v[0], v[1], v[2])?;
                g.dot_const(y, &proj)
            })
            .unwrap();
            assert!(err < 1e-4, "k={k}: {err}");
        }
    }

    #[test]
    fn finite_differences_batchnorm_and_relu_and_pool() {
        let ins = vec![rand_tensor(vec![5, 3, 6], 30), rand_tensor(vec![3], 31), rand_tensor(vec![3], 32)];
        let proj = rand_tensor(vec![5, 3], 33);
        let err = finite_diff_check(&ins, |g, v| {
            let (y, _) = g.batchnorm_train(v[0], v[1], v[2])?;
            let r = g.relu(y);
            let p = g.global_max_pool(r)?;
            g.dot_const(p, &proj)
        })
        .unwrap();
        assert!(err < 1e-4, "{err}");

        let ins = vec![rand_tensor(vec![6, 4], 34), rand_tensor(vec![4], 35), rand_tensor(vec![4], 36)];
        let proj = rand_tensor(vec![6, 4], 37);
        let err = finite_diff_check(&ins, |g, v| {
            let y = g.batchnorm_eval(v[0], v[1], v[2], &[0.1, -0.2, 0.3, 0.0], &[1.0, 2.0, 0.5, 0.7])?;
            g.dot_const(y, &proj)
        })
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn finite_differences_attention_and_time_linear() {
        let ins = attention_inputs(2, 5, 12, 2, 3, 40);
        let proj = rand_tensor(vec![2, 12], 44);
        let err = finite_diff_check(&ins, |g, v| {
            let y = g.temporal_attention(v[0], v[1], v[2], v[3])?;
            g.dot_const(y, &proj)
        })
        .unwrap();
        assert!(err < 1e-4, "{err}");

        let ins = vec![rand_tensor(vec![2, 3, 5], 45), rand_tensor(vec![4, 3], 46), rand_tensor(vec![4], 47)];
        let pe = rand_tensor(vec![5, 4], 48);
        let proj = rand_tensor(vec![2, 5, 4], 49);
        let err = finite_diff_check(&ins, |g, v| {
            let y = g.time_linear(v[0], v[1], v[2])?;
            let y = g.add_const(y, &pe)?;
            g.dot_const(y, &proj)
        })
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn finite_differences_cross_entropy() {
        let ins = vec![rand_tensor(vec![5, 4], 50)];
        let err = finite_diff_check(&ins, |g, v| g.weighted_cross_entropy(v[0], &[0, 3, 1, 1, 2], &[0.5, 2.0, 1.0, 4.0])).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let ins = vec![rand_tensor(vec![4, 7], 60), rand_tensor(vec![3, 7], 61), rand_tensor(vec![3], 62)];
        let proj = rand_tensor(vec![4, 3], 63);
        let f = |g: &mut Graph, v: &[Var]| {
            let y = g.linear(v[0], v[1], v[2])?;
            g.dot_const(y, &proj)
        };
        let (_, mut analytic) = analytic_gradients(&ins, f).unwrap();
        let numeric = numeric_gradients(&ins, f).unwrap();
        assert!(max_relative_error(&analytic, &numeric) < 1e-4);
        analytic[1].data[5] += 0.5;
        assert!(max_relative_error(&analytic, &numeric) > 1e-2);
    }

    #[test]
    fn manifest_and_blob_round_trip() {
        let mut p = ParamSet::new();
        p.add_param("w", rand_tensor(vec![3, 2], 70));
        p.add_param("b", rand_tensor(vec![3], 71));
        p.add_buffer("rm", rand_tensor(vec![3], 72));
        assert_eq!(p.learnable_count(), 9);
        let back = ParamSet::from_manifest(&p.manifest(), &p.blob()).unwrap();
        assert_eq!(back, p);
        assert!(ParamSet::from_manifest(&p.manifest(), &p.blob()[..10]).is_err());
        assert!(p.manifest().starts_with("param w 3x2\n"));
    }


    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]

            #[test]
            fn softmax_rows_are_distributions(rows in 1usize..6, cols in 1usize..8, seed in 0u64..1000, scale in 0.1f64..10.0) {
                let mut x = rand_tensor(vec![rows, cols], seed);
                x.data.iter_mut().for_each(|v| *v *= scale);
                for row in softmax_rows(&x).data.chunks(cols) {
                    prop_assert!(row.iter().all(|&p| p > 0.0));
                    prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                }
            }

            #[test]
            fn linear_and_conv_gradients(n in 1usize..4, cin in 1usize..4, cout in 1usize..4, t in 3usize..8, k in 1usize..4, seed in 0u64..1000) {
                let ins = vec![rand_tensor(vec![n, cin, t], seed), rand_tensor(vec![cout, cin, k], seed + 1), rand_tensor(vec![cout], seed + 2)];
                let proj = rand_tensor(vec![n, cout, t], seed + 3);
                let err = finite_diff_check(&ins, |g, v| {
                    let y = g.conv1d(v[0], v[1], v[2])?;
                    g.dot_const(y, &proj)
                }).unwrap();
                prop_assert!(err < 1e-4, "conv1d {}", err);

                let f = cin * t;
                let ins = vec![rand_tensor(vec![n, f], seed + 4), rand_tensor(vec![cout, f], seed + 5), rand_tensor(vec![cout], seed + 6)];
                let proj = rand_tensor(vec![n, cout], seed + 7);
                let err = finite_diff_check(&ins, |g, v| {
                    let y = g.linear(v[0], v[1], v[2])?;
                    g.dot_const(y, &proj)
                }).unwrap();
                prop_assert!(err < 1e-4, "linear {}", err);
            }

            #[test]
            fn attention_weights_sum_to_one(n in 1usize..4, t in 1usize..7, heads in 1usize..4, dk in 1usize..4, seed in 0u64..1000) {
                let ins = attention_inputs(n, t, 2 * heads, heads, dk, seed);
                let mut g = Graph::new();
                let v: Vec<Var> = ins.into_iter().map(|x| g.leaf(x)).collect();
                let y = g.temporal_attention(v[0], v[1], v[2], v[3]).unwrap();
                let a = g.attention_weights(y).unwrap();
                for w in a.data.chunks(t) {
                    prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                }
            }
        }
    }
}
