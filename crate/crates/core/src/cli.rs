//! The `sits` command line: flat `key=value` configuration and dispatch.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use thiserror::Error;

use crate::dataset::{self, SitsDataset, SynthConfig, TimeGrid};
use crate::evaluation::{self, ClassifierSpec, CvConfig, Fitted};
use crate::forest::{ForestConfig, RandomForest};
use crate::imbalance::{ImbalanceMethod, ResampleConfig};
use crate::models::{Architecture, ModelInstance};
use crate::preprocess::{self, BandStats, FeatureMatrix};
use crate::training::TrainConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config key `{key}`: {reason}")]
    Config { key: String, reason: String },
    #[error("config line {line}: {reason}")]
    ConfigSyntax { line: usize, reason: String },
    #[error("{0}")]
    Input(String),
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Dataset(#[from] dataset::DatasetError),
    #[error(transparent)]
    Preprocess(#[from] preprocess::PreprocessError),
    #[error(transparent)]
    Eval(#[from] evaluation::EvalError),
    #[error(transparent)]
    Model(#[from] crate::models::ModelError),
    #[error(transparent)]
    Forest(#[from] crate::forest::ForestError),
}

fn key_err(key: &str, reason: impl Into<String>) -> CliError {
    CliError::Config { key: key.to_string(), reason: reason.into() }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.display().to_string(), source }
}

/// Every accepted key with its default.
pub const DEFAULTS: &[(&str, &str)] = &[
    ("seed", "0"),
    ("out", "out"),
    ("threads", "1"),
    ("data", ""),
    ("checkpoint", ""),
    ("synth_scale", "0.25"),
    ("synth_separation", "1"),
    ("synth_noise", "0.02"),
    ("synth_gap_prob", "0.2"),
    ("synth_pixels_min", "6"),
    ("synth_pixels_max", "20"),
    ("model", "mlp"),
    ("mlp_widths", "1024,512,256"),
    ("cnn_filters", "128,128,128"),
    ("cnn_kernels", "3,3,2"),
    ("ltae_heads", "6"),
    ("ltae_key_dim", "8"),
    ("ltae_embed", "370"),
    ("ltae_mlp", "512"),
    ("ltae_positional", "true"),
    ("rf_trees", "100"),
    ("rf_max_depth", "none"),
    ("rf_features_per_split", "auto"),
    ("learning_rate", "auto"),
    ("batch_size", "auto"),
    ("max_epochs", "1000"),
    ("plateau_patience", "20"),
    ("plateau_factor", "0.5"),
    ("lr_floor", "1e-6"),
    ("early_stop_patience", "40"),
    ("val_fraction", "0.1"),
    ("imbalance", "none"),
    ("smote_k", "5"),
    ("undersample_plots", "400"),
    ("k", "10"),
];

pub const MODELS: [&str; 4] = ["mlp", "tempcnn", "ltae", "rf"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Generate a synthetic phenology dataset.
    Synth,
    /// Gap-fill and standardize a dataset.
    Preprocess,
    /// Plot-level k-fold cross-validation.
    Cv,
    /// Train on a dataset and write a checkpoint.
    Train,
    /// Per-pixel predictions from a checkpoint.
    Predict,
    /// Score a checkpoint on a labeled dataset.
    Evaluate,
}

#[derive(Debug, Parser)]
#[command(name = "sits", about = "Pixel-level satellite image time series classification")]
pub struct Args {
    #[command(subcommand)]
    pub command: Command,
    /// Flat key=value config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<String>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<String>,
    #[arg(long, global = true)]
    pub threads: Option<String>,
    /// Input dataset file.
    #[arg(long, global = true)]
    pub data: Option<String>,
    /// Checkpoint directory written by `train`.
    #[arg(long, global = true)]
    pub checkpoint: Option<String>,
    /// mlp, tempcnn, ltae or rf.
    #[arg(long, global = true)]
    pub model: Option<String>,
    /// none, class-weight, smote, adasyn or undersample.
    #[arg(long, global = true)]
    pub imbalance: Option<String>,
    #[arg(long, global = true)]
    pub smote_k: Option<String>,
    #[arg(long, global = true)]
    pub undersample_plots: Option<String>,
    #[arg(long, global = true)]
    pub batch_size: Option<String>,
    /// Number of folds.
    #[arg(long, global = true)]
    pub k: Option<String>,
    /// Any other key, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
}

impl Args {
    fn overrides(&self) -> Result<Vec<(String, String)>, CliError> {
        let named = [
            ("seed", &self.seed),
            ("out", &self.out),
            ("threads", &self.threads),
            ("data", &self.data),
            ("checkpoint", &self.checkpoint),
            ("model", &self.model),
            ("imbalance", &self.imbalance),
            ("smote_k", &self.smote_k),
            ("undersample_plots", &self.undersample_plots),
            ("batch_size", &self.batch_size),
            ("k", &self.k),
        ];
        let mut out = Vec::new();
        for s in &self.set {
            let (k, v) = s.split_once('=').ok_or_else(|| key_err(s, "expected KEY=VALUE"))?;
            out.push((k.trim().to_string(), v.trim().to_string()));
        }
        for (k, v) in named {
            if let Some(v) = v {
                out.push((k.to_string(), v.clone()));
            }
        }
        Ok(out)
    }
}

/// Parses a flat config file: `key=value` lines, `#` comments.
pub fn parse_config_text(text: &str) -> Result<Vec<(String, String)>, CliError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::ConfigSyntax { line: i + 1, reason: format!("expected key=value, got `{line}`") })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Resolved values: defaults, then file values, then flags.
pub fn resolve(file: &[(String, String)], flags: &[(String, String)]) -> Result<BTreeMap<String, String>, CliError> {
    let mut map: BTreeMap<String, String> = DEFAULTS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
    for (k, v) in file.iter().chain(flags) {
        match map.get_mut(k) {
            Some(slot) => *slot = v.clone(),
            None => return Err(key_err(k, "unknown key")),
        }
    }
    Ok(map)
}

/// Echo of resolved values, loadable with `--config`.
pub fn echo(values: &BTreeMap<String, String>) -> String {
    values.iter().fold(String::new(), |mut s, (k, v)| {
        let _ = writeln!(s, "{k}={v}");
        s
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub seed: u64,
    pub out: PathBuf,
    pub threads: usize,
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub synth_scale: f64,
    pub synth_separation: f64,
    pub synth_noise: f64,
    pub synth_gap_prob: f64,
    pub synth_pixels: (usize, usize),
    pub classifier: ClassifierSpec,
    pub resample: ResampleConfig,
    pub k: usize,
}

struct Reader<'a>(&'a BTreeMap<String, String>);

impl Reader<'_> {
    fn raw(&self, key: &str) -> &str {
        self.0.get(key).map(String::as_str).unwrap_or("")
    }

    fn parse<T: std::str::FromStr>(&self, key: &str, what: &str) -> Result<T, CliError> {
        let v = self.raw(key);
        v.parse().map_err(|_| key_err(key, format!("expected {what}, got `{v}`")))
    }

    fn positive(&self, key: &str) -> Result<usize, CliError> {
        let v: usize = self.parse(key, "a positive integer")?;
        if v == 0 {
            return Err(key_err(key, "must be at least 1"));
        }
        Ok(v)
    }

    fn list(&self, key: &str) -> Result<Vec<usize>, CliError> {
        let v = self.raw(key);
        let items: Result<Vec<usize>, _> = v.split(',').map(|x| x.trim().parse()).collect();
        match items {
            Ok(l) if !l.is_empty() && !l.contains(&0) => Ok(l),
            _ => Err(key_err(key, format!("expected a comma-separated list of positive integers, got `{v}`"))),
        }
    }

    fn flag(&self, key: &str) -> Result<bool, CliError> {
        match self.raw(key) {
            "true" => Ok(true),
            "false" => Ok(false),
            v => Err(key_err(key, format!("expected true or false, got `{v}`"))),
        }
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        let v = self.raw(key);
        (!v.is_empty()).then(|| PathBuf::from(v))
    }

    fn real(&self, key: &str) -> Result<f64, CliError> {
        let v: f64 = self.parse(key, "a number")?;
        if !v.is_finite() {
            return Err(key_err(key, "must be finite"));
        }
        Ok(v)
    }
}

impl Settings {
    pub fn from_values(values: &BTreeMap<String, String>) -> Result<Self, CliError> {
        let r = Reader(values);
        let model = r.raw("model");
        if !MODELS.contains(&model) {
            return Err(key_err("model", format!("unknown model `{model}`; allowed values: {}", MODELS.join(", "))));
        }
        let method: ImbalanceMethod = r.raw("imbalance").parse().map_err(|e: String| key_err("imbalance", e))?;
        let arch = match model {
            "mlp" => Some(Architecture::Mlp { widths: r.list("mlp_widths")? }),
            "tempcnn" => {
                let (filters, kernels) = (r.list("cnn_filters")?, r.list("cnn_kernels")?);
                if filters.len() != kernels.len() {
                    return Err(key_err("cnn_kernels", "needs one kernel size per entry of cnn_filters"));
                }
                Some(Architecture::TempCnn { filters, kernels })
            }
            "ltae" => Some(Architecture::Ltae {
                heads: r.positive("ltae_heads")?,
                key_dim: r.positive("ltae_key_dim")?,
                embed: r.positive("ltae_embed")?,
                mlp_width: r.positive("ltae_mlp")?,
                positional_encoding: r.flag("ltae_positional")?,
            }),
            _ => None,
        };
        let classifier = match arch {
            Some(arch) => {
                let defaults = TrainConfig::for_arch(&arch);
                let learning_rate = match r.raw("learning_rate") {
                    "auto" => defaults.learning_rate,
                    _ => r.real("learning_rate")?,
                };
                let batch_size = match r.raw("batch_size") {
                    "auto" if model == "mlp" && method == ImbalanceMethod::Smote => 8192,
                    "auto" => 4096,
                    _ => r.parse("batch_size", "an integer")?,
                };
                let train = TrainConfig {
                    learning_rate,
                    batch_size,
                    max_epochs: r.parse("max_epochs", "an integer")?,
                    plateau_patience: r.positive("plateau_patience")?,
                    plateau_factor: r.real("plateau_factor")?,
                    lr_floor: r.real("lr_floor")?,
                    early_stop_patience: r.positive("early_stop_patience")?,
                    val_fraction: r.real("val_fraction")?,
                    seed: 0,
                };
                train.validate().map_err(|e| key_err("train", e.to_string()))?;
                ClassifierSpec::Neural { arch, train }
            }
            None => ClassifierSpec::Forest(ForestConfig {
                n_trees: r.positive("rf_trees")?,
                max_depth: match r.raw("rf_max_depth") {
                    "none" => None,
                    _ => Some(r.positive("rf_max_depth")?),
                },
                features_per_split: match r.raw("rf_features_per_split") {
                    "auto" => None,
                    _ => Some(r.positive("rf_features_per_split")?),
                },
                ..Default::default()
            }),
        };
        let resample = ResampleConfig {
            method,
            k_neighbors: r.positive("smote_k")?,
            undersample_plots: r.positive("undersample_plots")?,
            seed: 0,
        };
        let synth_gap_prob = r.real("synth_gap_prob")?;
        if !(0.0..1.0).contains(&synth_gap_prob) {
            return Err(key_err("synth_gap_prob", "must lie in [0, 1)"));
        }
        let synth_noise = r.real("synth_noise")?;
        if synth_noise < 0.0 {
            return Err(key_err("synth_noise", "must be non-negative"));
        }
        let synth_scale = r.real("synth_scale")?;
        if synth_scale <= 0.0 {
            return Err(key_err("synth_scale", "must be positive"));
        }
        let synth_pixels = (r.positive("synth_pixels_min")?, r.positive("synth_pixels_max")?);
        if synth_pixels.0 > synth_pixels.1 {
            return Err(key_err("synth_pixels_max", "must be at least synth_pixels_min"));
        }
        let k: usize = r.parse("k", "an integer")?;
        if k < 2 {
            return Err(key_err("k", "must be at least 2"));
        }
        Ok(Settings {
            seed: r.parse("seed", "an unsigned integer")?,
            out: PathBuf::from(r.raw("out")),
            threads: r.positive("threads")?,
            data: r.path("data"),
            checkpoint: r.path("checkpoint"),
            synth_scale,
            synth_separation: r.real("synth_separation")?,
            synth_noise,
            synth_gap_prob,
            synth_pixels,
            classifier,
            resample,
            k,
        })
    }
}

/// Files written by a command, removed again if the command fails.
struct Outputs {
    dir: PathBuf,
    written: Vec<PathBuf>,
    created_dirs: Vec<PathBuf>,
}

impl Outputs {
    fn new(dir: &Path) -> Result<Self, CliError> {
        let mut created_dirs = Vec::new();
        let mut missing = Vec::new();
        let mut d = dir;
        while !d.as_os_str().is_empty() && !d.exists() {
            missing.push(d.to_path_buf());
            d = match d.parent() {
                Some(p) => p,
                None => break,
            };
        }
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        created_dirs.extend(missing);
        Ok(Self { dir: dir.to_path_buf(), written: Vec::new(), created_dirs })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        let p = self.dir.join(name);
        self.written.push(p.clone());
        p
    }

    fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf, CliError> {
        let p = self.path(name);
        std::fs::write(&p, contents).map_err(io_err(&p))?;
        Ok(p)
    }

    fn subdir(&mut self, name: &str) -> Result<PathBuf, CliError> {
        let p = self.dir.join(name);
        if !p.exists() {
            std::fs::create_dir_all(&p).map_err(io_err(&p))?;
            self.created_dirs.push(p.clone());
        }
        Ok(p)
    }

    fn cleanup(self) {
        for p in self.written.iter().rev() {
            let _ = std::fs::remove_file(p);
        }
        let mut dirs = self.created_dirs;
        dirs.sort_by_key(|d| std::cmp::Reverse(d.components().count()));
        for d in dirs {
            let _ = std::fs::remove_dir_all(&d);
        }
    }
}

fn require<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a PathBuf, CliError> {
    p.as_ref().ok_or_else(|| key_err(key, "required path is missing"))
}

const CHECKPOINT_MODEL: &str = "model";
const CHECKPOINT_FOREST: &str = "forest.txt";

/// Everything besides the classifier itself that a checkpoint needs.
struct CheckpointMeta {
    class_names: Vec<String>,
    grid: TimeGrid,
    stats: BandStats,
}

fn write_meta(out: &mut Outputs, dir: &str, meta: &CheckpointMeta) -> Result<(), CliError> {
    let g = &meta.grid;
    out.write(&format!("{dir}/classes.txt"), meta.class_names.join("\n") + "\n")?;
    out.write(&format!("{dir}/grid.txt"), format!("{},{},{},{}\n", g.start_day, g.step_days, g.n_steps, g.n_bands))?;
    out.write(&format!("{dir}/stats.csv"), meta.stats.to_csv())?;
    Ok(())
}

fn read_text(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(io_err(path))
}

fn read_meta(dir: &Path) -> Result<CheckpointMeta, CliError> {
    let class_names: Vec<String> = read_text(&dir.join("classes.txt"))?.lines().map(str::to_string).collect();
    let g = read_text(&dir.join("grid.txt"))?;
    let f: Vec<i64> = g.trim().split(',').filter_map(|x| x.parse().ok()).collect();
    if f.len() != 4 || f[2] < 0 || f[3] < 0 {
        return Err(CliError::Input(format!("{}: malformed grid.txt", dir.display())));
    }
    let grid = TimeGrid::new(f[0], f[1], f[2] as usize, f[3] as usize)?;
    let stats = BandStats::from_csv(&read_text(&dir.join("stats.csv"))?)?;
    Ok(CheckpointMeta { class_names, grid, stats })
}

fn load_fitted(dir: &Path) -> Result<Fitted, CliError> {
    let forest = dir.join(CHECKPOINT_FOREST);
    if forest.exists() {
        Ok(Fitted::Forest(RandomForest::load(&forest)?))
    } else {
        Ok(Fitted::Neural(ModelInstance::load(dir.join(CHECKPOINT_MODEL))?))
    }
}

/// Standardized features of `ds` on the checkpoint grid, labels remapped to
/// the checkpoint's class order.
fn features_for_checkpoint(ds: &mut SitsDataset, meta: &CheckpointMeta) -> Result<FeatureMatrix, CliError> {
    if ds.n_bands() != meta.grid.n_bands {
        return Err(CliError::Input(format!(
            "band count mismatch: data has {} bands, checkpoint expects {}",
            ds.n_bands(),
            meta.grid.n_bands
        )));
    }
    let remap: Vec<usize> = ds
        .class_names
        .iter()
        .map(|n| {
            meta.class_names
                .iter()
                .position(|c| c == n)
                .ok_or_else(|| CliError::Input(format!("class `{n}` is unknown to the checkpoint")))
        })
        .collect::<Result<_, _>>()?;
    ds.grid = meta.grid;
    ds.preprocessed = false;
    let mut m = preprocess::build_features(ds)?;
    m.labels.iter_mut().for_each(|l| *l = remap[*l]);
    Ok(preprocess::standardize_apply(&m, &meta.stats)?)
}

fn synth_config(s: &Settings) -> SynthConfig {
    let mut cfg = SynthConfig::forest_mix(s.synth_scale, s.synth_separation, s.synth_noise, s.seed);
    cfg.gap_prob = s.synth_gap_prob;
    cfg.pixels_per_plot = s.synth_pixels;
    cfg
}

fn run_command(cmd: Command, s: &Settings, values: &BTreeMap<String, String>, out: &mut Outputs) -> Result<(), CliError> {
    out.write("config.txt", echo(values))?;
    match cmd {
        Command::Synth => {
            let ds = dataset::generate_synthetic(&synth_config(s))?;
            out.write("dataset.csv", dataset::format_dataset(&ds)?)?;
            out.write("summary.txt", dataset::dataset_summary(&ds).to_string())?;
        }
        Command::Preprocess => {
            let ds = dataset::load_dataset(require(&s.data, "data")?)?;
            let m = preprocess::build_features(&ds)?;
            let stats = preprocess::standardize_fit(&m)?;
            let z = preprocess::standardize_apply(&m, &stats)?;
            let mut pre = z.to_dataset(ds.grid, ds.class_names.clone())?;
            pre.preprocessed = true;
            out.write("features.csv", dataset::format_dataset(&pre)?)?;
            out.write("stats.csv", stats.to_csv())?;
        }
        Command::Cv => {
            let ds = dataset::load_dataset(require(&s.data, "data")?)?;
            let cfg = CvConfig { k: s.k, seed: s.seed, classifier: s.classifier.clone(), resample: s.resample.clone() };
            let report = evaluation::run_cv(&ds, &cfg)?;
            out.write("cv_report.txt", report.to_text())?;
            out.write("cv_folds.csv", report.to_csv())?;
            out.write("confusion_mean_normalized.csv", report.mean_normalized_csv())?;
            out.write("confusion_pooled.csv", report.pooled.to_csv(&report.class_names))?;
        }
        Command::Train => {
            let ds = dataset::load_dataset(require(&s.data, "data")?)?;
            let raw = preprocess::build_features(&ds)?;
            let stats = preprocess::standardize_fit(&raw)?;
            let m = preprocess::standardize_apply(&raw, &stats)?;
            let (fitted, report) = evaluation::fit(&s.classifier, &m, ds.n_classes(), &s.resample, s.seed)?;
            out.subdir("checkpoint")?;
            let meta = CheckpointMeta { class_names: ds.class_names.clone(), grid: ds.grid, stats };
            write_meta(out, "checkpoint", &meta)?;
            match &fitted {
                Fitted::Neural(model) => {
                    let dir = out.subdir("checkpoint/model")?;
                    for f in ["manifest.txt", "params.bin", "model.txt"] {
                        out.path(&format!("checkpoint/model/{f}"));
                    }
                    model.save(&dir)?;
                }
                Fitted::Forest(f) => {
                    out.write(&format!("checkpoint/{CHECKPOINT_FOREST}"), f.to_text())?;
                }
            }
            if let Some(r) = report {
                out.write("train_log.csv", r.to_csv())?;
                out.write("train_summary.txt", r.summary() + "\n")?;
            }
        }
        Command::Predict | Command::Evaluate => {
            let dir = require(&s.checkpoint, "checkpoint")?;
            let meta = read_meta(dir)?;
            let fitted = load_fitted(dir)?;
            let mut ds = dataset::load_dataset(require(&s.data, "data")?)?;
            let m = features_for_checkpoint(&mut ds, &meta)?;
            let (labels, probs) = fitted.predict_proba(&m)?;
            let k = meta.class_names.len();
            if cmd == Command::Predict {
                let mut text = format!("pixel_id,plot_id,predicted,{}\n", meta.class_names.iter().map(|c| format!("p_{c}")).collect::<Vec<_>>().join(","));
                for i in 0..m.n_rows {
                    let p: Vec<String> = probs[i * k..(i + 1) * k].iter().map(|v| v.to_string()).collect();
                    let _ = writeln!(text, "{},{},{},{}", m.pixel_ids[i], m.plot_ids[i], meta.class_names[labels[i]], p.join(","));
                }
                out.write("predictions.csv", text)?;
            } else {
                let ev = evaluation::evaluate_predictions(&m.plot_ids, &m.labels, &labels, k)?;
                out.write("metrics.txt", ev.to_text(&meta.class_names))?;
                out.write("confusion.csv", ev.confusion.to_csv(&meta.class_names))?;
                let mut pr = String::from("class,plots,retrieved_50,recall_50,retrieved_20,recall_20\n");
                let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
                for c in 0..k {
                    let _ = writeln!(
                        pr,
                        "{},{},{},{},{},{}",
                        meta.class_names[c],
                        ev.plots_50.plots[c],
                        ev.plots_50.retrieved[c],
                        opt(ev.plots_50.recall[c]),
                        ev.plots_20.retrieved[c],
                        opt(ev.plots_20.recall[c])
                    );
                }
                let _ = writeln!(pr, "mean,,,{},,{}", ev.plots_50.ba, ev.plots_20.ba);
                out.write("plot_recall.csv", pr)?;
            }
        }
    }
    Ok(())
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args = match Args::try_parse_from(args) {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&args) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

pub fn execute(args: &Args) -> Result<(), CliError> {
    let file = match &args.config {
        Some(p) => parse_config_text(&read_text(p)?)?,
        None => Vec::new(),
    };
    let values = resolve(&file, &args.overrides()?)?;
    let settings = Settings::from_values(&values)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(settings.threads)
        .build()
        .map_err(|e| key_err("threads", e.to_string()))?;
    let mut out = Outputs::new(&settings.out)?;
    match pool.install(|| run_command(args.command, &settings, &values, &mut out)) {
        Ok(()) => Ok(()),
        Err(e) => {
            out.cleanup();
            Err(e)
        }
    }
}
