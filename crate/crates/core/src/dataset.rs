//! Labeled pixel time series grouped into plots.
//!
//! A dataset stores raw, irregular acquisitions shared by every pixel (one
//! acquisition calendar per file) together with a per-pixel validity mask.
//! The regular [`TimeGrid`] is the target of gap-filling.
//!
//! # File format
//!
//! UTF-8, comma separated. Header lines start with `#`:
//!
//! ```text
//! #classes=oak,pine
//! #bands=2
//! #days=0,7,15
//! #grid=0,10,2          (optional: start,step,n_steps)
//! #preprocessed=true    (optional)
//! 1,10,oak,0.1,0.2,0.3,0.4,0.5,0.6,1,1,1
//! ```
//!
//! Each pixel row is `pixel_id,plot_id,class_name`, then the band-major
//! values `v(1,1)..v(1,T),v(2,1)..v(B,T)`, then `T` validity flags. Masked
//! acquisitions carry the value 0.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::rng;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("line {line}: malformed header: {reason}")]
    MalformedHeader { line: usize, reason: String },
    #[error("line {line}: acquisition days are not strictly increasing")]
    NonMonotoneDays { line: usize },
    #[error("line {line}: unknown class name `{name}`")]
    UnknownClass { line: usize, name: String },
    #[error("line {line}: duplicate pixel_id {pixel_id}")]
    DuplicatePixel { line: usize, pixel_id: u64 },
    #[error("line {line}: plot {plot_id} already has label `{expected}`, got `{found}`")]
    MixedPlot { line: usize, plot_id: u64, expected: String, found: String },
    #[error("line {line}: malformed row: {reason}")]
    MalformedRow { line: usize, reason: String },
    #[error("no pixels")]
    NoPixels,
    #[error("dataset has no classes")]
    NoClasses,
    #[error("pixel {pixel_id}: {reason}")]
    InvalidPixel { pixel_id: u64, reason: String },
    #[error("invalid time grid: {0}")]
    InvalidGrid(String),
    #[error("invalid synthetic config: {0}")]
    InvalidSynthConfig(String),
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// Regular temporal grid that acquisitions are interpolated onto.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimeGrid {
    pub start_day: i64,
    pub step_days: i64,
    pub n_steps: usize,
    pub n_bands: usize,
}

impl Default for TimeGrid {
    /// Two years at one date every 10 days over 10 bands: 740 features.
    fn default() -> Self {
        Self { start_day: 0, step_days: 10, n_steps: 74, n_bands: 10 }
    }
}

impl TimeGrid {
    pub fn new(start_day: i64, step_days: i64, n_steps: usize, n_bands: usize) -> Result<Self, DatasetError> {
        let grid = Self { start_day, step_days, n_steps, n_bands };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.step_days < 1 {
            return Err(DatasetError::InvalidGrid(format!("step_days must be >= 1, got {}", self.step_days)));
        }
        if self.n_steps < 2 {
            return Err(DatasetError::InvalidGrid(format!("n_steps must be >= 2, got {}", self.n_steps)));
        }
        if self.n_bands < 1 {
            return Err(DatasetError::InvalidGrid("n_bands must be >= 1".into()));
        }
        Ok(())
    }

    pub fn n_features(&self) -> usize {
        self.n_bands * self.n_steps
    }

    pub fn day(&self, step: usize) -> i64 {
        self.start_day + self.step_days * step as i64
    }

    pub fn days(&self) -> Vec<i64> {
        (0..self.n_steps).map(|s| self.day(s)).collect()
    }

    /// Grid covering `[first, last]` of the acquisition calendar at `step_days`.
    pub fn covering(days: &[i64], step_days: i64, n_bands: usize) -> Result<Self, DatasetError> {
        let (first, last) = match (days.first(), days.last()) {
            (Some(&f), Some(&l)) => (f, l),
            _ => return Err(DatasetError::InvalidGrid("empty acquisition calendar".into())),
        };
        if step_days < 1 {
            return Err(DatasetError::InvalidGrid(format!("step_days must be >= 1, got {step_days}")));
        }
        let n_steps = (((last - first) / step_days) as usize + 1).max(2);
        Self::new(first, step_days, n_steps, n_bands)
    }
}

/// One labeled pixel: `n_bands` series over the dataset's acquisition days.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelSample {
    pub pixel_id: u64,
    pub plot_id: u64,
    pub label: usize,
    /// Band-major: `values[band * n_acq + acq]`.
    pub values: Vec<f64>,
    /// One flag per acquisition, shared by all bands.
    pub valid: Vec<bool>,
}

impl PixelSample {
    pub fn n_acquisitions(&self) -> usize {
        self.valid.len()
    }

    pub fn value(&self, band: usize, acq: usize) -> f64 {
        self.values[band * self.valid.len() + acq]
    }

    pub fn band(&self, band: usize) -> &[f64] {
        let n = self.valid.len();
        &self.values[band * n..(band + 1) * n]
    }
}

/// A pure stand: every member pixel carries the plot's label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Plot {
    pub plot_id: u64,
    pub label: usize,
    pub pixel_ids: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SitsDataset {
    pub grid: TimeGrid,
    pub class_names: Vec<String>,
    /// Acquisition calendar shared by every pixel.
    pub days: Vec<i64>,
    pub pixels: Vec<PixelSample>,
    /// Plots in order of first appearance.
    pub plots: Vec<Plot>,
    /// Set when values are already gap-filled and standardized.
    pub preprocessed: bool,
}

impl SitsDataset {
    /// Validates the pixels and derives the plot table.
    pub fn new(
        grid: TimeGrid,
        class_names: Vec<String>,
        days: Vec<i64>,
        pixels: Vec<PixelSample>,
    ) -> Result<Self, DatasetError> {
        grid.validate()?;
        if class_names.is_empty() {
            return Err(DatasetError::NoClasses);
        }
        if pixels.is_empty() {
            return Err(DatasetError::NoPixels);
        }
        if days.windows(2).any(|w| w[0] >= w[1]) {
            return Err(DatasetError::NonMonotoneDays { line: 0 });
        }
        let n_acq = days.len();
        let mut seen = HashSet::with_capacity(pixels.len());
        let mut plot_index: HashMap<u64, usize> = HashMap::new();
        let mut plots: Vec<Plot> = Vec::new();
        for px in &pixels {
            let bad = |reason: String| DatasetError::InvalidPixel { pixel_id: px.pixel_id, reason };
            if !seen.insert(px.pixel_id) {
                return Err(bad("duplicate pixel_id".into()));
            }
            if px.label >= class_names.len() {
                return Err(bad(format!("label {} out of range", px.label)));
            }
            if px.valid.len() != n_acq || px.values.len() != n_acq * grid.n_bands {
                return Err(bad("value/mask length does not match bands x days".into()));
            }
            if !px.valid.iter().any(|&v| v) {
                return Err(bad("no valid acquisition".into()));
            }
            if px.values.iter().any(|v| !v.is_finite()) {
                return Err(bad("non-finite value".into()));
            }
            match plot_index.get(&px.plot_id) {
                Some(&i) => {
                    if plots[i].label != px.label {
                        return Err(bad(format!("plot {} has mixed labels", px.plot_id)));
                    }
                    plots[i].pixel_ids.push(px.pixel_id);
                }
                None => {
                    plot_index.insert(px.plot_id, plots.len());
                    plots.push(Plot { plot_id: px.plot_id, label: px.label, pixel_ids: vec![px.pixel_id] });
                }
            }
        }
        Ok(Self { grid, class_names, days, pixels, plots, preprocessed: false })
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn n_bands(&self) -> usize {
        self.grid.n_bands
    }
}

// ---------------------------------------------------------------------------
// Columnar text format
// ---------------------------------------------------------------------------

fn parse_header<'a>(line: &'a str, key: &str, lineno: usize) -> Result<&'a str, DatasetError> {
    line.strip_prefix('#')
        .and_then(|rest| rest.strip_prefix(key))
        .and_then(|rest| rest.strip_prefix('='))
        .ok_or_else(|| DatasetError::MalformedHeader { line: lineno, reason: format!("expected `#{key}=...`") })
}

/// Parses the columnar text format from a string.
pub fn parse_dataset(text: &str) -> Result<SitsDataset, DatasetError> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim_end_matches('\r')));

    let mut next_header = |key: &str| -> Result<(usize, String), DatasetError> {
        match lines.next() {
            Some((no, l)) => parse_header(l, key, no).map(|v| (no, v.to_string())),
            None => Err(DatasetError::MalformedHeader { line: 0, reason: format!("missing `#{key}=` header") }),
        }
    };

    let (_, classes) = next_header("classes")?;
    let class_names: Vec<String> =
        if classes.is_empty() { Vec::new() } else { classes.split(',').map(|s| s.trim().to_string()).collect() };
    if class_names.iter().any(|c| c.is_empty()) {
        return Err(DatasetError::MalformedHeader { line: 1, reason: "empty class name".into() });
    }
    if class_names.is_empty() {
        return Err(DatasetError::NoClasses);
    }
    let (bands_line, bands) = next_header("bands")?;
    let n_bands: usize = bands.trim().parse().map_err(|_| DatasetError::MalformedHeader {
        line: bands_line,
        reason: format!("invalid band count `{bands}`"),
    })?;
    if n_bands == 0 {
        return Err(DatasetError::MalformedHeader { line: bands_line, reason: "band count must be >= 1".into() });
    }
    let (days_line, days_str) = next_header("days")?;
    let days: Vec<i64> = days_str
        .split(',')
        .map(|d| d.trim().parse::<i64>())
        .collect::<Result<_, _>>()
        .map_err(|_| DatasetError::MalformedHeader { line: days_line, reason: "invalid day list".into() })?;
    if days.is_empty() {
        return Err(DatasetError::MalformedHeader { line: days_line, reason: "empty day list".into() });
    }
    if days.windows(2).any(|w| w[0] >= w[1]) {
        return Err(DatasetError::NonMonotoneDays { line: days_line });
    }

    let class_index: HashMap<&str, usize> = class_names.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
    let n_acq = days.len();
    let n_values = n_bands * n_acq;
    let mut grid: Option<TimeGrid> = None;
    let mut preprocessed = false;
    let mut pixels = Vec::new();
    let mut seen: HashSet<u64> = HashSet::new();
    let mut plot_labels: HashMap<u64, usize> = HashMap::new();

    for (lineno, line) in lines {
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            if !pixels.is_empty() {
                return Err(DatasetError::MalformedHeader { line: lineno, reason: "header after pixel rows".into() });
            }
            let (key, value) = rest.split_once('=').ok_or_else(|| DatasetError::MalformedHeader {
                line: lineno,
                reason: "expected key=value".into(),
            })?;
            match key {
                "grid" => {
                    let parts: Vec<&str> = value.split(',').collect();
                    let bad = || DatasetError::MalformedHeader { line: lineno, reason: "expected #grid=start,step,n_steps".into() };
                    if parts.len() != 3 {
                        return Err(bad());
                    }
                    let start = parts[0].trim().parse().map_err(|_| bad())?;
                    let step = parts[1].trim().parse().map_err(|_| bad())?;
                    let n = parts[2].trim().parse().map_err(|_| bad())?;
                    grid = Some(TimeGrid::new(start, step, n, n_bands).map_err(|e| DatasetError::MalformedHeader {
                        line: lineno,
                        reason: e.to_string(),
                    })?);
                }
                "preprocessed" => {
                    preprocessed = match value {
                        "true" => true,
                        "false" => false,
                        _ => return Err(DatasetError::MalformedHeader { line: lineno, reason: "expected true|false".into() }),
                    }
                }
                _ => return Err(DatasetError::MalformedHeader { line: lineno, reason: format!("unknown header `{key}`") }),
            }
            continue;
        }

        let fields: Vec<&str> = line.split(',').collect();
        let expected = 3 + n_values + n_acq;
        if fields.len() != expected {
            return Err(DatasetError::MalformedRow {
                line: lineno,
                reason: format!("expected {expected} fields, found {}", fields.len()),
            });
        }
        let row_err = |reason: String| DatasetError::MalformedRow { line: lineno, reason };
        let pixel_id: u64 = fields[0].parse().map_err(|_| row_err(format!("invalid pixel_id `{}`", fields[0])))?;
        let plot_id: u64 = fields[1].parse().map_err(|_| row_err(format!("invalid plot_id `{}`", fields[1])))?;
        let label = *class_index
            .get(fields[2])
            .ok_or_else(|| DatasetError::UnknownClass { line: lineno, name: fields[2].to_string() })?;
        if !seen.insert(pixel_id) {
            return Err(DatasetError::DuplicatePixel { line: lineno, pixel_id });
        }
        if let Some(&prev) = plot_labels.get(&plot_id) {
            if prev != label {
                return Err(DatasetError::MixedPlot {
                    line: lineno,
                    plot_id,
                    expected: class_names[prev].clone(),
                    found: class_names[label].clone(),
                });
            }
        } else {
            plot_labels.insert(plot_id, label);
        }
        let values: Vec<f64> = fields[3..3 + n_values]
            .iter()
            .map(|s| s.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| row_err("invalid value".into()))?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(row_err("non-finite value".into()));
        }
        if !preprocessed && values.iter().any(|v| !(-1.0..=2.0).contains(v)) {
            return Err(row_err("reflectance outside [-1, 2]".into()));
        }
        let valid: Vec<bool> = fields[3 + n_values..]
            .iter()
            .map(|s| match *s {
                "1" => Ok(true),
                "0" => Ok(false),
                other => Err(row_err(format!("invalid validity flag `{other}`"))),
            })
            .collect::<Result<_, _>>()?;
        if !valid.iter().any(|&v| v) {
            return Err(row_err("no valid acquisition".into()));
        }
        for (a, &ok) in valid.iter().enumerate() {
            if !ok && (0..n_bands).any(|b| values[b * n_acq + a] != 0.0) {
                return Err(row_err(format!("masked acquisition {} carries a nonzero value", a + 1)));
            }
        }
        pixels.push(PixelSample { pixel_id, plot_id, label, values, valid });
    }

    if pixels.is_empty() {
        return Err(DatasetError::NoPixels);
    }
    let grid = match grid {
        Some(g) => g,
        None => TimeGrid::covering(&days, TimeGrid::default().step_days, n_bands)?,
    };
    let mut ds = SitsDataset::new(grid, class_names, days, pixels)?;
    ds.preprocessed = preprocessed;
    Ok(ds)
}

/// Serializes to the columnar text format. Output is a pure function of `ds`.
pub fn format_dataset(ds: &SitsDataset) -> Result<String, DatasetError> {
    if ds.class_names.is_empty() {
        return Err(DatasetError::NoClasses);
    }
    if ds.pixels.is_empty() {
        return Err(DatasetError::NoPixels);
    }
    let mut out = String::new();
    let _ = writeln!(out, "#classes={}", ds.class_names.join(","));
    let _ = writeln!(out, "#bands={}", ds.grid.n_bands);
    let days: Vec<String> = ds.days.iter().map(|d| d.to_string()).collect();
    let _ = writeln!(out, "#days={}", days.join(","));
    let g = &ds.grid;
    let _ = writeln!(out, "#grid={},{},{}", g.start_day, g.step_days, g.n_steps);
    if ds.preprocessed {
        out.push_str("#preprocessed=true\n");
    }
    for px in &ds.pixels {
        let _ = write!(out, "{},{},{}", px.pixel_id, px.plot_id, ds.class_names[px.label]);
        for v in &px.values {
            let _ = write!(out, ",{v}");
        }
        for &m in &px.valid {
            out.push_str(if m { ",1" } else { ",0" });
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<SitsDataset, DatasetError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io { path: path.display().to_string(), source })?;
    parse_dataset(&text)
}

pub fn write_dataset(ds: &SitsDataset, path: impl AsRef<Path>) -> Result<(), DatasetError> {
    let path = path.as_ref();
    let text = format_dataset(ds)?;
    std::fs::write(path, text).map_err(|source| DatasetError::Io { path: path.display().to_string(), source })
}

// ---------------------------------------------------------------------------
// Summary
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSummary {
    pub class_names: Vec<String>,
    pub plots_per_class: Vec<usize>,
    pub pixels_per_class: Vec<usize>,
    pub plot_share: Vec<f64>,
    pub pixel_share: Vec<f64>,
    pub total_plots: usize,
    pub total_pixels: usize,
    pub min_plot_size: usize,
    pub max_plot_size: usize,
    pub mean_plot_size: f64,
    /// Valid reflectances outside the nominal `[0, 1]` range.
    pub out_of_range_values: usize,
}

pub fn dataset_summary(ds: &SitsDataset) -> DatasetSummary {
    let k = ds.n_classes();
    let mut plots_per_class = vec![0usize; k];
    for p in &ds.plots {
        plots_per_class[p.label] += 1;
    }
    let mut pixels_per_class = vec![0usize; k];
    for px in &ds.pixels {
        pixels_per_class[px.label] += 1;
    }
    let total_plots = ds.plots.len();
    let total_pixels = ds.pixels.len();
    let share = |counts: &[usize], total: usize| -> Vec<f64> {
        counts.iter().map(|&c| if total == 0 { 0.0 } else { c as f64 / total as f64 }).collect()
    };
    let sizes = ds.plots.iter().map(|p| p.pixel_ids.len());
    let out_of_range_values = if ds.preprocessed {
        0
    } else {
        let n_acq = ds.days.len();
        ds.pixels
            .iter()
            .map(|px| {
                px.values
                    .iter()
                    .enumerate()
                    .filter(|&(i, v)| px.valid[i % n_acq] && !(0.0..=1.0).contains(v))
                    .count()
            })
            .sum()
    };
    DatasetSummary {
        class_names: ds.class_names.clone(),
        plot_share: share(&plots_per_class, total_plots),
        pixel_share: share(&pixels_per_class, total_pixels),
        plots_per_class,
        pixels_per_class,
        total_plots,
        total_pixels,
        min_plot_size: sizes.clone().min().unwrap_or(0),
        max_plot_size: sizes.clone().max().unwrap_or(0),
        mean_plot_size: if total_plots == 0 { 0.0 } else { total_pixels as f64 / total_plots as f64 },
        out_of_range_values,
    }
}

impl std::fmt::Display for DatasetSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "{:<14} {:>7} {:>8} {:>8} {:>8}", "class", "plots", "share", "pixels", "share")?;
        for (i, name) in self.class_names.iter().enumerate() {
            writeln!(
                f,
                "{:<14} {:>7} {:>8.4} {:>8} {:>8.4}",
                name, self.plots_per_class[i], self.plot_share[i], self.pixels_per_class[i], self.pixel_share[i]
            )?;
        }
        writeln!(f, "{:<14} {:>7} {:>8} {:>8}", "total", self.total_plots, "", self.total_pixels)?;
        write!(
            f,
            "plot size: min {} / mean {:.2} / max {}; out-of-range values: {}",
            self.min_plot_size, self.mean_plot_size, self.max_plot_size, self.out_of_range_values
        )
    }
}

// ---------------------------------------------------------------------------
// Synthetic phenology generator
// ---------------------------------------------------------------------------

/// Double-logistic seasonal profile of one class.
///
/// Noiseless reflectance of band `b` at day-of-season `t`:
/// `base[b] + amp[b] * (logistic(k_up * (t - green_up)) - logistic(k_down * (t - senescence)))`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassPhenology {
    pub name: String,
    pub base: Vec<f64>,
    pub amp: Vec<f64>,
    pub green_up: f64,
    pub senescence: f64,
    pub k_up: f64,
    pub k_down: f64,
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl ClassPhenology {
    pub fn signal(&self, band: usize, day_of_season: f64) -> f64 {
        self.signal_shifted(band, day_of_season, 0.0, 1.0)
    }

    fn signal_shifted(&self, band: usize, t: f64, shift: f64, gain: f64) -> f64 {
        let ramp = logistic(self.k_up * (t - self.green_up - shift)) - logistic(self.k_down * (t - self.senescence - shift));
        self.base[band] + gain * self.amp[band] * ramp
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub classes: Vec<ClassPhenology>,
    pub plots_per_class: Vec<usize>,
    /// Inclusive range of pixels per plot.
    pub pixels_per_plot: (usize, usize),
    pub noise_std: f64,
    /// Probability that an acquisition is masked (cloud).
    pub gap_prob: f64,
    /// Per-plot standard deviation of a shift (days) applied to both transitions.
    pub plot_shift_std: f64,
    /// Per-plot standard deviation of a multiplicative amplitude perturbation.
    pub plot_gain_std: f64,
    /// Seasonal period; the profile is evaluated at `day mod season_days`.
    pub season_days: i64,
    pub acquisition_days: Vec<i64>,
    pub grid: TimeGrid,
    pub seed: u64,
}

/// Species of the reference inventory with their plot counts.
pub const REFERENCE_SPECIES: [(&str, usize); 10] = [
    ("birch", 52),
    ("hornbeam", 48),
    ("chestnut", 61),
    ("oak", 3219),
    ("douglas_fir", 131),
    ("fraxinus", 39),
    ("beech", 254),
    ("poplars", 78),
    ("pines", 486),
    ("robinia", 20),
];

/// Irregular acquisition calendar: a nominal 5-day revisit over two years
/// with roughly half of the dates missing.
pub fn irregular_calendar(seed: u64, last_day: i64) -> Vec<i64> {
    let mut r = rng::stream(seed, rng::tag::SYNTH ^ 0xca1);
    let mut days: Vec<i64> = (0..=last_day).step_by(5).filter(|&d| d == 0 || d == last_day || r.gen_bool(0.5)).collect();
    days.dedup();
    days
}

impl SynthConfig {
    /// Ten species in reference-inventory proportions, scaled by `scale`
    /// (every class keeps at least 2 plots).
    ///
    /// `separation` in (0, 1] pulls every class profile toward the mean
    /// profile: 1 keeps the archetypes as is, smaller values increase
    /// overlap between species.
    pub fn forest_mix(scale: f64, separation: f64, noise_std: f64, seed: u64) -> Self {
        let plots_per_class =
            REFERENCE_SPECIES.iter().map(|&(_, n)| ((n as f64 * scale).round() as usize).max(2)).collect();
        let classes = species_archetypes(separation);
        let grid = TimeGrid::default();
        Self {
            classes,
            plots_per_class,
            pixels_per_plot: (6, 20),
            noise_std,
            gap_prob: 0.2,
            plot_shift_std: 4.0,
            plot_gain_std: 0.05,
            season_days: 365,
            acquisition_days: irregular_calendar(seed, grid.day(grid.n_steps - 1)),
            grid,
            seed,
        }
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        let bad = |m: String| Err(DatasetError::InvalidSynthConfig(m));
        self.grid.validate()?;
        if self.classes.is_empty() {
            return bad("no classes".into());
        }
        if self.plots_per_class.len() != self.classes.len() {
            return bad(format!("{} plot counts for {} classes", self.plots_per_class.len(), self.classes.len()));
        }
        if self.plots_per_class.contains(&0) {
            return bad("every class needs at least one plot".into());
        }
        let (lo, hi) = self.pixels_per_plot;
        if lo == 0 || lo > hi {
            return bad(format!("invalid pixels_per_plot range {lo}..={hi}"));
        }
        if !(self.noise_std >= 0.0) || !(self.plot_shift_std >= 0.0) || !(self.plot_gain_std >= 0.0) {
            return bad("noise parameters must be >= 0".into());
        }
        if !(0.0..1.0).contains(&self.gap_prob) {
            return bad(format!("gap probability {} outside [0, 1)", self.gap_prob));
        }
        if self.season_days < 1 {
            return bad("season_days must be >= 1".into());
        }
        if self.acquisition_days.is_empty() || self.acquisition_days.windows(2).any(|w| w[0] >= w[1]) {
            return bad("acquisition days must be non-empty and strictly increasing".into());
        }
        for c in &self.classes {
            if c.base.len() != self.grid.n_bands || c.amp.len() != self.grid.n_bands {
                return bad(format!("class `{}` profile does not have {} bands", c.name, self.grid.n_bands));
            }
        }
        Ok(())
    }
}

/// Band order: B2 B3 B4 B5 B6 B7 B8 B8A B11 B12.
fn species_archetypes(separation: f64) -> Vec<ClassPhenology> {
    // (name, winter base per band group, summer amplitude multiplier, green-up, senescence, k_up, k_down)
    // Visible and SWIR reflectance drop with leaf-out, red-edge/NIR rise.
    struct Arch {
        name: &'static str,
        vis: f64,
        nir: f64,
        swir: f64,
        leaf: f64,
        green_up: f64,
        senescence: f64,
        k_up: f64,
        k_down: f64,
    }
    let arch = [
        Arch { name: "birch", vis: 0.060, nir: 0.24, swir: 0.17, leaf: 1.00, green_up: 105.0, senescence: 285.0, k_up: 0.12, k_down: 0.08 },
        Arch { name: "hornbeam", vis: 0.055, nir: 0.22, swir: 0.16, leaf: 0.95, green_up: 112.0, senescence: 300.0, k_up: 0.10, k_down: 0.07 },
        Arch { name: "chestnut", vis: 0.058, nir: 0.23, swir: 0.18, leaf: 0.90, green_up: 125.0, senescence: 295.0, k_up: 0.09, k_down: 0.09 },
        Arch { name: "oak", vis: 0.057, nir: 0.22, swir: 0.17, leaf: 0.92, green_up: 118.0, senescence: 298.0, k_up: 0.10, k_down: 0.08 },
        Arch { name: "douglas_fir", vis: 0.035, nir: 0.20, swir: 0.09, leaf: 0.05, green_up: 120.0, senescence: 290.0, k_up: 0.05, k_down: 0.05 },
        Arch { name: "fraxinus", vis: 0.062, nir: 0.23, swir: 0.18, leaf: 0.85, green_up: 130.0, senescence: 285.0, k_up: 0.11, k_down: 0.10 },
        Arch { name: "beech", vis: 0.052, nir: 0.21, swir: 0.16, leaf: 1.05, green_up: 110.0, senescence: 305.0, k_up: 0.14, k_down: 0.07 },
        Arch { name: "poplars", vis: 0.066, nir: 0.27, swir: 0.19, leaf: 1.20, green_up: 100.0, senescence: 290.0, k_up: 0.08, k_down: 0.06 },
        Arch { name: "pines", vis: 0.040, nir: 0.17, swir: 0.11, leaf: 0.08, green_up: 120.0, senescence: 290.0, k_up: 0.05, k_down: 0.05 },
        Arch { name: "robinia", vis: 0.063, nir: 0.24, swir: 0.18, leaf: 0.88, green_up: 128.0, senescence: 288.0, k_up: 0.11, k_down: 0.10 },
    ];
    // Per-band summer change of a fully leaved canopy.
    let band_amp = [-0.020, 0.010, -0.030, 0.030, 0.120, 0.180, 0.200, 0.210, 0.040, -0.030];
    let band_base = |a: &Arch, b: usize| match b {
        0..=2 => a.vis * [0.9, 1.2, 1.0][b],
        3..=7 => a.nir * [0.5, 0.8, 0.9, 1.0, 1.0][b - 3],
        _ => a.swir * [1.0, 0.6][b - 8],
    };

    let raw: Vec<ClassPhenology> = arch
        .iter()
        .map(|a| ClassPhenology {
            name: a.name.to_string(),
            base: (0..10).map(|b| band_base(a, b)).collect(),
            amp: (0..10).map(|b| band_amp[b] * a.leaf).collect(),
            green_up: a.green_up,
            senescence: a.senescence,
            k_up: a.k_up,
            k_down: a.k_down,
        })
        .collect();
    let n = raw.len() as f64;
    let mean = |f: &dyn Fn(&ClassPhenology) -> f64| raw.iter().map(f).sum::<f64>() / n;
    let s = separation.clamp(0.0, 1.0);
    let pull = |v: f64, m: f64| m + s * (v - m);
    let mean_base: Vec<f64> = (0..10).map(|b| mean(&|c| c.base[b])).collect();
    let mean_amp: Vec<f64> = (0..10).map(|b| mean(&|c| c.amp[b])).collect();
    let (mg, ms) = (mean(&|c| c.green_up), mean(&|c| c.senescence));
    raw.iter()
        .map(|c| ClassPhenology {
            name: c.name.clone(),
            base: (0..10).map(|b| pull(c.base[b], mean_base[b])).collect(),
            amp: (0..10).map(|b| pull(c.amp[b], mean_amp[b])).collect(),
            green_up: pull(c.green_up, mg),
            senescence: pull(c.senescence, ms),
            k_up: c.k_up,
            k_down: c.k_down,
        })
        .collect()
}

/// Generates a labeled dataset; a pure function of `cfg` (seed included).
///
/// Reflectances are quantized to 1e-4 (L2A integer scaling) and clamped to
/// `[-1, 2]`. If every acquisition of a pixel is masked, the middle one is
/// kept valid so the pixel stays usable.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<SitsDataset, DatasetError> {
    cfg.validate()?;
    let n_bands = cfg.grid.n_bands;
    let days = cfg.acquisition_days.clone();
    let n_acq = days.len();
    let mut r = rng::stream(cfg.seed, rng::tag::SYNTH);
    let noise = Normal::new(0.0, cfg.noise_std.max(0.0)).expect("finite std");
    let unit = Normal::new(0.0, 1.0).expect("unit normal");

    let mut pixels = Vec::new();
    let mut plot_id = 0u64;
    let mut pixel_id = 0u64;
    for (label, (class, &n_plots)) in cfg.classes.iter().zip(&cfg.plots_per_class).enumerate() {
        for _ in 0..n_plots {
            plot_id += 1;
            let shift = cfg.plot_shift_std * unit.sample(&mut r);
            let gain = 1.0 + cfg.plot_gain_std * unit.sample(&mut r);
            let size = r.gen_range(cfg.pixels_per_plot.0..=cfg.pixels_per_plot.1);
            for _ in 0..size {
                pixel_id += 1;
                let mut valid: Vec<bool> = (0..n_acq).map(|_| !(cfg.gap_prob > 0.0 && r.gen_bool(cfg.gap_prob))).collect();
                if !valid.iter().any(|&v| v) {
                    valid[n_acq / 2] = true;
                }
                let mut values = vec![0.0; n_bands * n_acq];
                for b in 0..n_bands {
                    for (a, &day) in days.iter().enumerate() {
                        let eps = if cfg.noise_std > 0.0 { noise.sample(&mut r) } else { 0.0 };
                        if !valid[a] {
                            continue;
                        }
                        let t = day.rem_euclid(cfg.season_days) as f64;
                        let v = class.signal_shifted(b, t, shift, gain) + eps;
                        values[b * n_acq + a] = ((v.clamp(-1.0, 2.0)) * 1e4).round() / 1e4;
                    }
                }
                pixels.push(PixelSample { pixel_id, plot_id, label, values, valid });
            }
        }
    }
    let names = cfg.classes.iter().map(|c| c.name.clone()).collect();
    SitsDataset::new(cfg.grid, names, days, pixels)
}

/// Plot label lookup.
pub fn plot_labels(ds: &SitsDataset) -> BTreeMap<u64, usize> {
    ds.plots.iter().map(|p| (p.plot_id, p.label)).collect()
}
