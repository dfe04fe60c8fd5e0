//! MLP, TempCNN and LTAE classifiers assembled from autodiff primitives.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng as _;
use thiserror::Error;

use crate::autodiff::{softmax_rows, AutodiffError, BatchMoments, BufferId, Graph, ParamId, ParamSet, Tensor, Var};
use crate::preprocess::{FeatureMatrix, Layout};
use crate::rng;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("{variant} expects {expected:?} input layout, got {found:?}")]
    LayoutMismatch { variant: &'static str, expected: Layout, found: Layout },
    #[error("input has {found} {what}, model expects {expected}")]
    InputMismatch { what: &'static str, expected: usize, found: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Architecture {
    Mlp { widths: Vec<usize> },
    TempCnn { filters: Vec<usize>, kernels: Vec<usize> },
    Ltae { heads: usize, key_dim: usize, embed: usize, mlp_width: usize, positional_encoding: bool },
}

impl Architecture {
    pub fn name(&self) -> &'static str {
        match self {
            Architecture::Mlp { .. } => "mlp",
            Architecture::TempCnn { .. } => "tempcnn",
            Architecture::Ltae { .. } => "ltae",
        }
    }

    pub fn layout(&self) -> Layout {
        match self {
            Architecture::Mlp { .. } => Layout::Flat,
            _ => Layout::Channels,
        }
    }

    pub fn default_mlp() -> Self {
        Architecture::Mlp { widths: vec![1024, 512, 256] }
    }

    pub fn default_tempcnn() -> Self {
        Architecture::TempCnn { filters: vec![128, 128, 128], kernels: vec![3, 3, 2] }
    }

    pub fn default_ltae() -> Self {
        Architecture::Ltae { heads: 6, key_dim: 8, embed: 370, mlp_width: 512, positional_encoding: true }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub arch: Architecture,
    pub n_classes: usize,
    pub n_bands: usize,
    pub n_steps: usize,
}

impl ModelConfig {
    pub fn new(arch: Architecture, n_classes: usize, n_bands: usize, n_steps: usize) -> Self {
        Self { arch, n_classes, n_bands, n_steps }
    }

    pub fn n_features(&self) -> usize {
        self.n_bands * self.n_steps
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if self.n_classes < 2 {
            return bad("at least 2 classes are required");
        }
        if self.n_bands == 0 || self.n_steps == 0 {
            return bad("input grid must be non-empty");
        }
        match &self.arch {
            Architecture::Mlp { widths } => {
                if widths.is_empty() {
                    return bad("MLP needs at least one hidden layer");
                }
                if widths.contains(&0) {
                    return bad("MLP widths must be positive");
                }
            }
            Architecture::TempCnn { filters, kernels } => {
                if filters.is_empty() {
                    return bad("TempCNN needs at least one convolution layer");
                }
                if filters.len() != kernels.len() {
                    return bad("TempCNN needs one kernel size per layer");
                }
                if filters.contains(&0) || kernels.contains(&0) {
                    return bad("TempCNN filters and kernel sizes must be positive");
                }
                if kernels.iter().any(|&k| k > self.n_steps) {
                    return bad("TempCNN kernel longer than the time series");
                }
            }
            Architecture::Ltae { heads, key_dim, embed, mlp_width, .. } => {
                if *heads == 0 || *key_dim == 0 || *embed == 0 || *mlp_width == 0 {
                    return bad("LTAE heads, key dim, embedding and MLP width must be positive");
                }
            }
        }
        Ok(())
    }

    /// LTAE embedding rounded up to a multiple of the head count.
    pub fn effective_embed(&self) -> Option<usize> {
        match self.arch {
            Architecture::Ltae { heads, embed, .. } => Some(embed.div_ceil(heads) * heads),
            _ => None,
        }
    }

    /// Flat `key=value` echo.
    pub fn to_kv(&self) -> String {
        let join = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut out = String::new();
        let _ = writeln!(out, "model={}", self.arch.name());
        match &self.arch {
            Architecture::Mlp { widths } => {
                let _ = writeln!(out, "mlp_widths={}", join(widths));
            }
            Architecture::TempCnn { filters, kernels } => {
                let _ = writeln!(out, "cnn_filters={}", join(filters));
                let _ = writeln!(out, "cnn_kernels={}", join(kernels));
            }
            Architecture::Ltae { heads, key_dim, embed, mlp_width, positional_encoding } => {
                let _ = writeln!(out, "ltae_heads={heads}");
                let _ = writeln!(out, "ltae_key_dim={key_dim}");
                let _ = writeln!(out, "ltae_embed={embed}");
                let _ = writeln!(out, "ltae_mlp={mlp_width}");
                let _ = writeln!(out, "ltae_positional={positional_encoding}");
            }
        }
        let _ = writeln!(out, "n_classes={}", self.n_classes);
        let _ = writeln!(out, "n_bands={}", self.n_bands);
        let _ = writeln!(out, "n_steps={}", self.n_steps);
        out
    }

    pub fn from_kv(text: &str) -> Result<Self, ModelError> {
        let bad = |m: String| ModelError::Checkpoint(m);
        let map: std::collections::BTreeMap<&str, &str> =
            text.lines().filter(|l| !l.trim().is_empty()).filter_map(|l| l.split_once('=')).collect();
        let get = |k: &str| map.get(k).copied().ok_or_else(|| bad(format!("missing `{k}`")));
        let num = |k: &str| -> Result<usize, ModelError> { get(k)?.parse().map_err(|_| bad(format!("invalid `{k}`"))) };
        let list = |k: &str| -> Result<Vec<usize>, ModelError> {
            get(k)?.split(',').map(|x| x.trim().parse()).collect::<Result<_, _>>().map_err(|_| bad(format!("invalid `{k}`")))
        };
        let arch = match get("model")? {
            "mlp" => Architecture::Mlp { widths: list("mlp_widths")? },
            "tempcnn" => Architecture::TempCnn { filters: list("cnn_filters")?, kernels: list("cnn_kernels")? },
            "ltae" => Architecture::Ltae {
                heads: num("ltae_heads")?,
                key_dim: num("ltae_key_dim")?,
                embed: num("ltae_embed")?,
                mlp_width: num("ltae_mlp")?,
                positional_encoding: get("ltae_positional")? == "true",
            },
            other => return Err(bad(format!("unknown model `{other}`"))),
        };
        Ok(Self { arch, n_classes: num("n_classes")?, n_bands: num("n_bands")?, n_steps: num("n_steps")? })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
struct Dense {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
    mean: BufferId,
    var: BufferId,
}

#[derive(Debug, Clone, PartialEq)]
enum Body {
    Mlp { hidden: Vec<(Dense, Norm)> },
    TempCnn { convs: Vec<(Dense, Norm)> },
    Ltae { embed: Dense, wk: ParamId, bk: ParamId, queries: ParamId, mlp: (Dense, Norm), positions: Option<Tensor> },
}

/// A parameterized network.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInstance {
    pub config: ModelConfig,
    pub params: ParamSet,
    pub mode: Mode,
    body: Body,
    head: Dense,
}

/// Output of a graph-building forward pass.
pub struct ForwardPass {
    pub logits: Var,
    /// One leaf per learnable parameter, in [`ParamSet`] order.
    pub param_vars: Vec<Var>,
    /// Train-mode batch statistics, one per batch-norm layer.
    pub moments: Vec<BatchMoments>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub classes: Vec<usize>,
    /// `[n, n_classes]` softmax probabilities.
    pub probabilities: Tensor,
}

struct Builder<'a> {
    params: ParamSet,
    rng: &'a mut rng::Rng,
}

impl Builder<'_> {
    fn he_uniform(&mut self, name: String, shape: Vec<usize>, fan_in: usize) -> ParamId {
        let bound = (6.0 / fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(-bound..bound)).collect();
        self.params.add_param(name, Tensor::new(shape, data))
    }

    fn dense(&mut self, prefix: &str, shape: Vec<usize>, fan_in: usize) -> Dense {
        let out = shape[0];
        let w = self.he_uniform(format!("{prefix}.weight"), shape, fan_in);
        let b = self.params.add_param(format!("{prefix}.bias"), Tensor::zeros(vec![out]));
        Dense { w, b }
    }

    fn norm(&mut self, prefix: &str, width: usize) -> Norm {
        Norm {
            gamma: self.params.add_param(format!("{prefix}.gamma"), Tensor::filled(vec![width], 1.0)),
            beta: self.params.add_param(format!("{prefix}.beta"), Tensor::zeros(vec![width])),
            mean: self.params.add_buffer(format!("{prefix}.running_mean"), Tensor::zeros(vec![width])),
            var: self.params.add_buffer(format!("{prefix}.running_var"), Tensor::filled(vec![width], 1.0)),
        }
    }
}

/// Sinusoidal encoding over grid-step index, `[steps, dim]`.
pub fn positional_encoding(steps: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0; steps * dim];
    for t in 0..steps {
        for i in 0..dim {
            let freq = 1000f64.powf(-((2 * (i / 2)) as f64) / dim as f64);
            let angle = t as f64 * freq;
            data[t * dim + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![steps, dim], data)
}

/// Builds a freshly initialized network: He-uniform weights, zero biases,
/// batch-norm scale 1 and shift 0. Deterministic given `seed`.
pub fn build(cfg: &ModelConfig, seed: u64) -> Result<ModelInstance, ModelError> {
    cfg.validate()?;
    let mut r = rng::stream(seed, rng::tag::MODEL_INIT);
    let mut b = Builder { params: ParamSet::new(), rng: &mut r };
    let k = cfg.n_classes;
    let (body, head) = match &cfg.arch {
        Architecture::Mlp { widths } => {
            let mut hidden = Vec::new();
            let mut fan_in = cfg.n_features();
            for (i, &w) in widths.iter().enumerate() {
                let d = b.dense(&format!("mlp.{i}"), vec![w, fan_in], fan_in);
                let n = b.norm(&format!("mlp.{i}.bn"), w);
                hidden.push((d, n));
                fan_in = w;
            }
            (Body::Mlp { hidden }, b.dense("head", vec![k, fan_in], fan_in))
        }
        Architecture::TempCnn { filters, kernels } => {
            let mut convs = Vec::new();
            let mut cin = cfg.n_bands;
            for (i, (&f, &ks)) in filters.iter().zip(kernels).enumerate() {
                let d = b.dense(&format!("conv.{i}"), vec![f, cin, ks], cin * ks);
                let n = b.norm(&format!("conv.{i}.bn"), f);
                convs.push((d, n));
                cin = f;
            }
            (Body::TempCnn { convs }, b.dense("head", vec![k, cin], cin))
        }
        Architecture::Ltae { heads, key_dim, embed, mlp_width, positional_encoding: pe } => {
            let e = cfg.effective_embed().expect("ltae");
            if e != *embed {
                log::info!("LTAE embedding {embed} rounded up to {e} ({heads} heads)");
            }
            let eh = e / heads;
            let embed_layer = b.dense("embed", vec![e, cfg.n_bands], cfg.n_bands);
            let wk = b.he_uniform("attn.key_weight".into(), vec![*heads, *key_dim, eh], eh);
            let bk = b.params.add_param("attn.key_bias", Tensor::zeros(vec![*heads, *key_dim]));
            let queries = b.he_uniform("attn.queries".into(), vec![*heads, *key_dim], *key_dim);
            let d = b.dense("mlp.0", vec![*mlp_width, e], e);
            let n = b.norm("mlp.0.bn", *mlp_width);
            let positions = pe.then(|| positional_encoding(cfg.n_steps, e));
            (
                Body::Ltae { embed: embed_layer, wk, bk, queries, mlp: (d, n), positions },
                b.dense("head", vec![k, *mlp_width], *mlp_width),
            )
        }
    };
    Ok(ModelInstance { config: cfg.clone(), params: b.params, mode: Mode::Train, body, head })
}

impl ModelInstance {
    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    /// Learnable scalars, running statistics excluded.
    pub fn param_count(&self) -> usize {
        self.params.learnable_count()
    }

    fn check_input(&self, x: &Tensor) -> Result<(), ModelError> {
        let cfg = &self.config;
        match self.config.arch.layout() {
            Layout::Flat => {
                if x.dims() != 2 {
                    return Err(ModelError::LayoutMismatch { variant: cfg.arch.name(), expected: Layout::Flat, found: Layout::Channels });
                }
                if x.shape[1] != cfg.n_features() {
                    return Err(ModelError::InputMismatch { what: "features", expected: cfg.n_features(), found: x.shape[1] });
                }
            }
            Layout::Channels => {
                if x.dims() != 3 {
                    return Err(ModelError::LayoutMismatch { variant: cfg.arch.name(), expected: Layout::Channels, found: Layout::Flat });
                }
                if x.shape[1] != cfg.n_bands {
                    return Err(ModelError::InputMismatch { what: "bands", expected: cfg.n_bands, found: x.shape[1] });
                }
                if x.shape[2] != cfg.n_steps {
                    return Err(ModelError::InputMismatch { what: "time steps", expected: cfg.n_steps, found: x.shape[2] });
                }
            }
        }
        Ok(())
    }

    fn norm_layer(
        &self,
        g: &mut Graph,
        x: Var,
        n: &Norm,
        p: &[Var],
        mode: Mode,
        moments: &mut Vec<BatchMoments>,
    ) -> Result<Var, ModelError> {
        let (gamma, beta) = (p[n.gamma.0], p[n.beta.0]);
        Ok(match mode {
            Mode::Train => {
                let (y, m) = g.batchnorm_train(x, gamma, beta)?;
                moments.push(m);
                y
            }
            Mode::Eval => g.batchnorm_eval(x, gamma, beta, &self.params.buffer(n.mean).data, &self.params.buffer(n.var).data)?,
        })
    }

    /// Records the network on `g` over externally supplied parameter leaves
    /// (`p[i]` is the leaf of the i-th learnable parameter).
    pub fn build_graph(&self, g: &mut Graph, x: Var, p: &[Var], mode: Mode) -> Result<(Var, Vec<BatchMoments>), ModelError> {
        assert_eq!(p.len(), self.params.n_params());
        let mut moments = Vec::new();
        let h = match &self.body {
            Body::Mlp { hidden } => {
                let mut h = x;
                for (d, n) in hidden {
                    h = g.linear(h, p[d.w.0], p[d.b.0])?;
                    h = self.norm_layer(g, h, n, p, mode, &mut moments)?;
                    h = g.relu(h);
                }
                h
            }
            Body::TempCnn { convs } => {
                let mut h = x;
                for (d, n) in convs {
                    h = g.conv1d(h, p[d.w.0], p[d.b.0])?;
                    h = self.norm_layer(g, h, n, p, mode, &mut moments)?;
                    h = g.relu(h);
                }
                g.global_max_pool(h)?
            }
            Body::Ltae { embed, wk, bk, queries, mlp, positions } => {
                let mut h = g.time_linear(x, p[embed.w.0], p[embed.b.0])?;
                if let Some(pe) = positions {
                    h = g.add_const(h, pe)?;
                }
                h = g.temporal_attention(h, p[wk.0], p[bk.0], p[queries.0])?;
                h = g.linear(h, p[mlp.0.w.0], p[mlp.0.b.0])?;
                h = self.norm_layer(g, h, &mlp.1, p, mode, &mut moments)?;
                g.relu(h)
            }
        };
        let logits = g.linear(h, p[self.head.w.0], p[self.head.b.0])?;
        Ok((logits, moments))
    }

    /// Registers the parameters as leaves and records the forward pass.
    pub fn forward_graph(&self, g: &mut Graph, x: &Tensor, mode: Mode) -> Result<ForwardPass, ModelError> {
        self.check_input(x)?;
        let xv = g.leaf(x.clone());
        let param_vars: Vec<Var> = self.params.params().map(|(_, t)| g.leaf(t.clone())).collect();
        let (logits, moments) = self.build_graph(g, xv, &param_vars, mode)?;
        Ok(ForwardPass { logits, param_vars, moments })
    }

    /// Folds train-mode batch statistics into the running statistics.
    pub fn apply_moments(&mut self, moments: &[BatchMoments]) {
        let norms: Vec<Norm> = match &self.body {
            Body::Mlp { hidden } => hidden.iter().map(|(_, n)| n.clone()).collect(),
            Body::TempCnn { convs } => convs.iter().map(|(_, n)| n.clone()).collect(),
            Body::Ltae { mlp, .. } => vec![mlp.1.clone()],
        };
        assert_eq!(norms.len(), moments.len());
        for (n, m) in norms.iter().zip(moments) {
            let mut mean = self.params.buffer(n.mean).data.clone();
            let mut var = self.params.buffer(n.var).data.clone();
            m.update_running(&mut mean, &mut var);
            self.params.buffer_mut(n.mean).data = mean;
            self.params.buffer_mut(n.var).data = var;
        }
    }

    /// Logits for a batch in the instance's current mode. Train mode uses
    /// batch statistics and updates the running statistics.
    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor, ModelError> {
        let mut g = Graph::new();
        let mode = self.mode;
        let pass = self.forward_graph(&mut g, x, mode)?;
        if mode == Mode::Train {
            self.apply_moments(&pass.moments);
        }
        Ok(g.value(pass.logits).clone())
    }

    /// Eval-mode logits; never mutates the model.
    pub fn eval_logits(&self, x: &Tensor) -> Result<Tensor, ModelError> {
        let mut g = Graph::new();
        let pass = self.forward_graph(&mut g, x, Mode::Eval)?;
        Ok(g.value(pass.logits).clone())
    }

    fn check_layout(&self, m: &FeatureMatrix) -> Result<(), ModelError> {
        let expected = self.config.arch.layout();
        if m.layout != expected {
            return Err(ModelError::LayoutMismatch { variant: self.config.arch.name(), expected, found: m.layout });
        }
        Ok(())
    }

    /// Eval-mode logits for every row of a matrix, in chunks.
    pub fn logits_matrix(&self, m: &FeatureMatrix) -> Result<Tensor, ModelError> {
        self.check_layout(m)?;
        const CHUNK: usize = 1024;
        let k = self.config.n_classes;
        let mut data = Vec::with_capacity(m.n_rows * k);
        let rows: Vec<usize> = (0..m.n_rows).collect();
        for chunk in rows.chunks(CHUNK) {
            data.extend(self.eval_logits(&m.batch_tensor(chunk))?.data);
        }
        Ok(Tensor::new(vec![m.n_rows, k], data))
    }

    /// Argmax of the softmax (ties to the lower class index).
    pub fn predict(&self, m: &FeatureMatrix) -> Result<Prediction, ModelError> {
        Ok(predict_from_logits(&self.logits_matrix(m)?))
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<(), ModelError> {
        let dir = dir.as_ref();
        let io = |path: &Path| {
            let path = path.display().to_string();
            move |source| ModelError::Io { path, source }
        };
        std::fs::create_dir_all(dir).map_err(io(dir))?;
        let files = [
            ("manifest.txt", self.params.manifest().into_bytes()),
            ("params.bin", self.params.blob()),
            ("model.txt", self.config.to_kv().into_bytes()),
        ];
        for (name, bytes) in files {
            let p = dir.join(name);
            std::fs::write(&p, bytes).map_err(io(&p))?;
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self, ModelError> {
        let dir = dir.as_ref();
        let read = |name: &str| {
            let p = dir.join(name);
            std::fs::read(&p).map_err(|source| ModelError::Io { path: p.display().to_string(), source })
        };
        let cfg_text = String::from_utf8(read("model.txt")?).map_err(|_| ModelError::Checkpoint("model.txt is not UTF-8".into()))?;
        let manifest = String::from_utf8(read("manifest.txt")?).map_err(|_| ModelError::Checkpoint("manifest is not UTF-8".into()))?;
        let cfg = ModelConfig::from_kv(&cfg_text)?;
        let mut model = build(&cfg, 0)?;
        let loaded = ParamSet::from_manifest(&manifest, &read("params.bin")?)?;
        if loaded.manifest() != model.params.manifest() {
            return Err(ModelError::Checkpoint("parameter manifest does not match the model config".into()));
        }
        model.params = loaded;
        model.mode = Mode::Eval;
        Ok(model)
    }
}

pub fn predict_from_logits(logits: &Tensor) -> Prediction {
    let k = logits.shape[1];
    let probabilities = softmax_rows(logits);
    let classes = probabilities
        .data
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for j in 1..k {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect();
    Prediction { classes, probabilities }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_check;

    fn rand_tensor(shape: Vec<usize>, seed: u64) -> Tensor {
        let mut r = rng::rng_from(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| r.gen_range(-1.0..1.0)).collect())
    }

    fn check_full_gradient(cfg: &ModelConfig, x_shape: Vec<usize>, seed: u64) -> f64 {
        let model = build(cfg, seed).unwrap();
        let mut inputs = vec![rand_tensor(x_shape, seed + 100)];
        // non-trivial batch-norm affine parameters
        let mut params: Vec<Tensor> = model.params.params().map(|(_, t)| t.clone()).collect();
        let mut r = rng::rng_from(seed + 7);
        for (i, (name, _)) in model.params.params().enumerate() {
            if name.ends_with("gamma") || name.ends_with("beta") || name.ends_with("bias") {
                params[i].data.iter_mut().for_each(|v| *v += r.gen_range(-0.5..0.5));
            }
        }
        inputs.extend(params);
        let n = inputs[0].shape[0];
        let labels: Vec<usize> = (0..n).map(|i| i % cfg.n_classes).collect();
        let weights: Vec<f64> = (0..cfg.n_classes).map(|c| 1.0 + c as f64).collect();
        finite_diff_check(&inputs, |g, v| {
            let (logits, _) = model.build_graph(g, v[0], &v[1..], Mode::Train).map_err(|e| match e {
                ModelError::Autodiff(a) => a,
                other => panic!("{other}"),
            })?;
            g.weighted_cross_entropy(logits, &labels, &weights)
        })
        .unwrap()
    }

    #[test]
    fn default_mlp_param_count() {
        let m = build(&ModelConfig::new(Architecture::default_mlp(), 10, 10, 74), 0).unwrap();
        assert_eq!(m.param_count(), 1_421_066);
        assert!(((m.param_count() as f64) - 1.4e6).abs() / 1.4e6 < 0.02);
    }

    #[test]
    fn toy_mlp_count_matches_formula() {
        let widths = [4usize, 2];
        let m = build(&ModelConfig::new(Architecture::Mlp { widths: widths.to_vec() }, 2, 10, 74), 0).unwrap();
        let mut fan = 740;
        let mut expect = 0;
        for &w in &widths {
            expect += fan * w + w + 2 * w;
            fan = w;
        }
        expect += fan * 2 + 2;
        assert_eq!(expect, 2992);
        assert_eq!(m.param_count(), expect);
    }

    #[test]
    fn other_default_counts() {
        let cnn = build(&ModelConfig::new(Architecture::default_tempcnn(), 10, 10, 74), 0).unwrap();
        assert_eq!(cnn.param_count(), 3968 + 256 + 49280 + 256 + 32896 + 256 + 1290);
        let cfg = ModelConfig::new(Architecture::default_ltae(), 10, 10, 74);
        assert_eq!(cfg.effective_embed(), Some(372));
        let ltae = build(&cfg, 0).unwrap();
        assert_eq!(ltae.param_count(), 4092 + 3024 + 48 + 190_976 + 1024 + 5130);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(build(&ModelConfig::new(Architecture::Mlp { widths: vec![] }, 3, 2, 5), 0).is_err());
        assert!(build(&ModelConfig::new(Architecture::Mlp { widths: vec![0] }, 3, 2, 5), 0).is_err());
        let bad = Architecture::TempCnn { filters: vec![4], kernels: vec![3, 3] };
        assert!(build(&ModelConfig::new(bad, 3, 2, 5), 0).is_err());
        let bad = Architecture::Ltae { heads: 0, key_dim: 8, embed: 12, mlp_width: 4, positional_encoding: true };
        assert!(build(&ModelConfig::new(bad, 3, 2, 5), 0).is_err());
    }

    #[test]
    fn same_seed_same_parameters() {
        let cfg = ModelConfig::new(Architecture::default_tempcnn(), 4, 3, 12);
        assert_eq!(build(&cfg, 5).unwrap(), build(&cfg, 5).unwrap());
        assert_ne!(build(&cfg, 5).unwrap().params, build(&cfg, 6).unwrap().params);
    }

    #[test]
    fn full_network_gradients() {
        let mlp = ModelConfig::new(Architecture::Mlp { widths: vec![8, 4] }, 3, 3, 4);
        assert!(check_full_gradient(&mlp, vec![5, 12], 1) < 1e-4);
        let cnn = ModelConfig::new(Architecture::TempCnn { filters: vec![3, 4], kernels: vec![3, 2] }, 3, 2, 9);
        assert!(check_full_gradient(&cnn, vec![4, 2, 9], 2) < 1e-4);
        let ltae = ModelConfig::new(
            Architecture::Ltae { heads: 2, key_dim: 3, embed: 12, mlp_width: 5, positional_encoding: true },
            3, 2, 6,
        );
        assert!(check_full_gradient(&ltae, vec![4, 2, 6], 3) < 1e-4);
    }

    fn eval_model(cfg: &ModelConfig, seed: u64) -> ModelInstance {
        let mut m = build(cfg, seed).unwrap();
        // settle running statistics on a random batch
        let shape = match cfg.arch.layout() {
            Layout::Flat => vec![16, cfg.n_features()],
            Layout::Channels => vec![16, cfg.n_bands, cfg.n_steps],
        };
        m.forward(&rand_tensor(shape, seed + 1)).unwrap();
        m.set_mode(Mode::Eval);
        m
    }

    fn all_small_configs() -> Vec<ModelConfig> {
        vec![
            ModelConfig::new(Architecture::Mlp { widths: vec![8, 4] }, 3, 3, 5),
            ModelConfig::new(Architecture::TempCnn { filters: vec![4, 4], kernels: vec![3, 2] }, 3, 3, 5),
            ModelConfig::new(Architecture::Ltae { heads: 2, key_dim: 3, embed: 7, mlp_width: 6, positional_encoding: true }, 3, 3, 5),
        ]
    }

    #[test]
    fn eval_is_row_independent_and_permutation_equivariant() {
        for cfg in all_small_configs() {
            let m = eval_model(&cfg, 3);
            let shape = match cfg.arch.layout() {
                Layout::Flat => vec![64, cfg.n_features()],
                Layout::Channels => vec![64, cfg.n_bands, cfg.n_steps],
            };
            let f = cfg.n_features();
            let x = rand_tensor(shape.clone(), 9);
            let all = m.eval_logits(&x).unwrap();
            let mut one_shape = shape.clone();
            one_shape[0] = 1;
            let row7 = Tensor::new(one_shape, x.data[7 * f..8 * f].to_vec());
            let single = m.eval_logits(&row7).unwrap();
            for (a, b) in single.data.iter().zip(&all.data[21..24]) {
                assert!((a - b).abs() < 1e-12);
            }
            let perm: Vec<usize> = (0..64).rev().collect();
            let xp = Tensor::new(shape, perm.iter().flat_map(|&i| x.data[i * f..(i + 1) * f].to_vec()).collect());
            let yp = m.eval_logits(&xp).unwrap();
            for (i, &src) in perm.iter().enumerate() {
                assert_eq!(&yp.data[i * 3..i * 3 + 3], &all.data[src * 3..src * 3 + 3]);
            }
            // repeated eval calls are bit-identical
            assert_eq!(m.eval_logits(&x).unwrap(), all);
            let probs = softmax_rows(&all);
            assert!(all.data.iter().all(|v| v.is_finite()));
            for row in probs.data.chunks(3) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn predict_tie_rule() {
        let p = predict_from_logits(&Tensor::new(vec![2, 3], vec![0.0, 0.0, -1.0, 1.0, 3.0, 2.0]));
        assert_eq!(p.classes, vec![0, 1]);
        let p = predict_from_logits(&Tensor::new(vec![1, 2], vec![0.0, 0.0]));
        assert_eq!(p.classes, vec![0]);
        assert!((p.probabilities.data.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn layout_mismatch_is_rejected() {
        let cfg = ModelConfig::new(Architecture::Mlp { widths: vec![4] }, 2, 2, 3);
        let m = build(&cfg, 0).unwrap();
        let fm = FeatureMatrix {
            data: vec![0.0; 6],
            n_rows: 1,
            n_bands: 2,
            n_steps: 3,
            layout: Layout::Channels,
            pixel_ids: vec![0],
            plot_ids: vec![0],
            labels: vec![0],
        };
        assert!(matches!(m.predict(&fm), Err(ModelError::LayoutMismatch { .. })));
        assert!(m.predict(&fm.as_layout(Layout::Flat)).is_ok());
        let wrong = Tensor::zeros(vec![1, 5]);
        assert!(matches!(m.eval_logits(&wrong), Err(ModelError::InputMismatch { .. })));
    }

    #[test]
    fn eval_forward_does_not_mutate() {
        let cfg = all_small_configs().remove(0);
        let mut m = eval_model(&cfg, 1);
        let before = m.clone();
        m.forward(&rand_tensor(vec![4, 15], 2)).unwrap();
        assert_eq!(m, before);
        m.set_mode(Mode::Train);
        m.forward(&rand_tensor(vec![4, 15], 2)).unwrap();
        assert_ne!(m.params, before.params);
    }

    #[test]
    fn max_pool_invariant_under_cyclic_shift() {
        let mut g = Graph::new();
        let mut base = vec![0.1, -0.3, 0.2, 0.9, 0.0, -0.5, 0.4];
        let x0 = g.leaf(Tensor::new(vec![1, 1, 7], base.clone()));
        let y0 = g.global_max_pool(x0).unwrap();
        let v0 = g.value(y0).data[0];
        for _ in 0..7 {
            base.rotate_right(1);
            let x = g.leaf(Tensor::new(vec![1, 1, 7], base.clone()));
            let y = g.global_max_pool(x).unwrap();
            assert_eq!(g.value(y).data[0], v0);
        }
    }

    #[test]
    fn ltae_without_positions_is_permutation_invariant() {
        let cfg = ModelConfig::new(
            Architecture::Ltae { heads: 2, key_dim: 3, embed: 6, mlp_width: 5, positional_encoding: false },
            3, 2, 6,
        );
        let m = eval_model(&cfg, 4);
        let x = rand_tensor(vec![2, 2, 6], 5);
        let perm = [3usize, 0, 5, 1, 4, 2];
        let mut xp = x.clone();
        for s in 0..2 {
            for c in 0..2 {
                for (t, &src) in perm.iter().enumerate() {
                    xp.data[(s * 2 + c) * 6 + t] = x.data[(s * 2 + c) * 6 + src];
                }
            }
        }
        let (a, b) = (m.eval_logits(&x).unwrap(), m.eval_logits(&xp).unwrap());
        for (u, v) in a.data.iter().zip(&b.data) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for cfg in all_small_configs() {
            let m = eval_model(&cfg, 8);
            let path = dir.path().join(cfg.arch.name());
            m.save(&path).unwrap();
            let back = ModelInstance::load(&path).unwrap();
            assert_eq!(back.params, m.params);
            assert_eq!(back.config, m.config);
        }
    }


    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(16))]

            #[test]
            fn eval_forward_is_pure(seed in 0u64..1000, which in 0usize..3) {
                let cfg = all_small_configs().swap_remove(which);
                let m = eval_model(&cfg, seed);
                let shape = match cfg.arch.layout() {
                    Layout::Flat => vec![5, cfg.n_features()],
                    Layout::Channels => vec![5, cfg.n_bands, cfg.n_steps],
                };
                let x = rand_tensor(shape, seed + 9);
                let before = m.clone();
                let a = m.eval_logits(&x).unwrap();
                prop_assert_eq!(&a, &m.eval_logits(&x).unwrap());
                prop_assert_eq!(&m, &before);
            }

            #[test]
            fn max_pool_ignores_cyclic_shifts(c in 1usize..4, t in 3usize..10, shift in 1usize..9, seed in 0u64..1000) {
                // unique interior maximum per channel, kept interior by the shift
                let mut r = rng::rng_from(seed);
                let mut x = vec![0.0; c * t];
                for ch in 0..c {
                    let peak = r.gen_range(1..t - 1);
                    for s in 0..t {
                        x[ch * t + s] = if s == peak { 2.0 + r.gen::<f64>() } else { r.gen_range(-1.0..1.0) };
                    }
                }
                let shifted: Vec<f64> = (0..c * t).map(|i| x[(i / t) * t + (i % t + shift) % t]).collect();
                let pool = |d: Vec<f64>| {
                    let mut g = Graph::new();
                    let v = g.leaf(Tensor::new(vec![1, c, t], d));
                    let y = g.global_max_pool(v).unwrap();
                    g.value(y).data.clone()
                };
                prop_assert_eq!(pool(x), pool(shifted));
            }
        }
    }
}
