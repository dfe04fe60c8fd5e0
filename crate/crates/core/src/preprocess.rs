//! Gap-filling onto the regular grid and per-band standardization.

use std::fmt::Write as _;

use thiserror::Error;

use crate::autodiff::Tensor;
use crate::dataset::{PixelSample, SitsDataset, TimeGrid};

/// Plot id carried by synthetic (oversampled) rows.
pub const SYNTHETIC_PLOT: u64 = u64::MAX;

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("pixel {pixel_id} has no valid acquisition")]
    NoValidAcquisition { pixel_id: u64 },
    #[error("pixel {pixel_id}: {found} values for {expected} (bands x acquisitions)")]
    ShapeMismatch { pixel_id: u64, expected: usize, found: usize },
    #[error("cannot fit statistics on an empty matrix")]
    EmptyMatrix,
    #[error("band {band} has zero variance")]
    ZeroVariance { band: usize },
    #[error("statistics cover {stats} bands, matrix has {matrix}")]
    BandMismatch { stats: usize, matrix: usize },
    #[error("malformed statistics file: {0}")]
    MalformedStats(String),
}

/// Memory layout of a feature row.
///
/// Both layouts store band-major rows (`band * n_steps + step`); they differ
/// in the tensor shape handed to a model: `[n, bands*steps]` for `Flat`,
/// `[n, bands, steps]` for `Channels`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    Flat,
    Channels,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub data: Vec<f64>,
    pub n_rows: usize,
    pub n_bands: usize,
    pub n_steps: usize,
    pub layout: Layout,
    pub pixel_ids: Vec<u64>,
    pub plot_ids: Vec<u64>,
    pub labels: Vec<usize>,
}

impl FeatureMatrix {
    pub fn n_features(&self) -> usize {
        self.n_bands * self.n_steps
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let f = self.n_features();
        &self.data[i * f..(i + 1) * f]
    }

    /// Index of `(band, step)` within a row.
    pub fn feature_index(&self, band: usize, step: usize) -> usize {
        band * self.n_steps + step
    }

    pub fn get(&self, row: usize, band: usize, step: usize) -> f64 {
        self.row(row)[self.feature_index(band, step)]
    }

    pub fn select_rows(&self, rows: &[usize]) -> FeatureMatrix {
        let f = self.n_features();
        let mut data = Vec::with_capacity(rows.len() * f);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        FeatureMatrix {
            data,
            n_rows: rows.len(),
            n_bands: self.n_bands,
            n_steps: self.n_steps,
            layout: self.layout,
            pixel_ids: rows.iter().map(|&r| self.pixel_ids[r]).collect(),
            plot_ids: rows.iter().map(|&r| self.plot_ids[r]).collect(),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
        }
    }

    pub fn as_layout(&self, layout: Layout) -> FeatureMatrix {
        FeatureMatrix { layout, ..self.clone() }
    }

    /// Tensor of the given rows, shaped for the current layout.
    pub fn batch_tensor(&self, rows: &[usize]) -> Tensor {
        let f = self.n_features();
        let mut data = Vec::with_capacity(rows.len() * f);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        let shape = match self.layout {
            Layout::Flat => vec![rows.len(), f],
            Layout::Channels => vec![rows.len(), self.n_bands, self.n_steps],
        };
        Tensor::new(shape, data)
    }

    pub fn tensor(&self) -> Tensor {
        let all: Vec<usize> = (0..self.n_rows).collect();
        self.batch_tensor(&all)
    }

    /// Appends the rows of `other` (same geometry).
    pub fn extend(&mut self, other: &FeatureMatrix) {
        assert_eq!(self.n_features(), other.n_features());
        self.data.extend_from_slice(&other.data);
        self.n_rows += other.n_rows;
        self.pixel_ids.extend_from_slice(&other.pixel_ids);
        self.plot_ids.extend_from_slice(&other.plot_ids);
        self.labels.extend_from_slice(&other.labels);
    }

    /// Converts back to a dataset whose acquisition calendar is the grid.
    pub fn to_dataset(&self, grid: TimeGrid, class_names: Vec<String>) -> Result<SitsDataset, crate::dataset::DatasetError> {
        let pixels = (0..self.n_rows)
            .map(|i| PixelSample {
                pixel_id: self.pixel_ids[i],
                plot_id: self.plot_ids[i],
                label: self.labels[i],
                values: self.row(i).to_vec(),
                valid: vec![true; self.n_steps],
            })
            .collect();
        let mut ds = SitsDataset::new(grid, class_names, grid.days(), pixels)?;
        ds.preprocessed = true;
        Ok(ds)
    }
}

/// Linear interpolation of the valid acquisitions onto the grid, with
/// constant extrapolation beyond the first/last valid date.
///
/// Returns `n_bands * n_steps` values, band-major.
pub fn gapfill(pixel: &PixelSample, days: &[i64], grid: &TimeGrid) -> Result<Vec<f64>, PreprocessError> {
    let n_acq = days.len();
    if pixel.valid.len() != n_acq || pixel.values.len() != n_acq * grid.n_bands {
        return Err(PreprocessError::ShapeMismatch {
            pixel_id: pixel.pixel_id,
            expected: n_acq * grid.n_bands,
            found: pixel.values.len(),
        });
    }
    let valid: Vec<usize> = (0..n_acq).filter(|&a| pixel.valid[a]).collect();
    if valid.is_empty() {
        return Err(PreprocessError::NoValidAcquisition { pixel_id: pixel.pixel_id });
    }

    // Per grid day: the bracketing valid acquisitions and the weight of the right one.
    let brackets: Vec<(usize, usize, f64)> = grid
        .days()
        .into_iter()
        .map(|g| {
            let right = valid.partition_point(|&a| days[a] < g);
            if right == 0 {
                (valid[0], valid[0], 0.0)
            } else if right == valid.len() {
                let last = valid[valid.len() - 1];
                (last, last, 0.0)
            } else {
                let (a0, a1) = (valid[right - 1], valid[right]);
                if days[a1] == g {
                    (a1, a1, 0.0)
                } else {
                    let (d0, d1) = (days[a0] as f64, days[a1] as f64);
                    (a0, a1, (g as f64 - d0) / (d1 - d0))
                }
            }
        })
        .collect();

    let mut out = Vec::with_capacity(grid.n_features());
    for b in 0..grid.n_bands {
        let series = pixel.band(b);
        for &(a0, a1, w) in &brackets {
            let v0 = series[a0];
            out.push(if w == 0.0 { v0 } else { v0 + (series[a1] - v0) * w });
        }
    }
    Ok(out)
}

/// Gap-fills every pixel of the dataset into a flat feature matrix.
///
/// Preprocessed datasets already live on the grid and are copied as is.
pub fn build_features(ds: &SitsDataset) -> Result<FeatureMatrix, PreprocessError> {
    let grid = &ds.grid;
    let mut data = Vec::with_capacity(ds.pixels.len() * grid.n_features());
    for px in &ds.pixels {
        if ds.preprocessed && ds.days == grid.days() {
            data.extend_from_slice(&px.values);
        } else {
            data.extend(gapfill(px, &ds.days, grid)?);
        }
    }
    Ok(FeatureMatrix {
        data,
        n_rows: ds.pixels.len(),
        n_bands: grid.n_bands,
        n_steps: grid.n_steps,
        layout: Layout::Flat,
        pixel_ids: ds.pixels.iter().map(|p| p.pixel_id).collect(),
        plot_ids: ds.pixels.iter().map(|p| p.plot_id).collect(),
        labels: ds.pixels.iter().map(|p| p.label).collect(),
    })
}

/// Per-band mean and population standard deviation, pooled over all
/// pixels and all grid dates of the band.
#[derive(Debug, Clone, PartialEq)]
pub struct BandStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl BandStats {
    pub fn identity(n_bands: usize) -> Self {
        Self { mean: vec![0.0; n_bands], std: vec![1.0; n_bands] }
    }

    pub fn n_bands(&self) -> usize {
        self.mean.len()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("band,mean,std\n");
        for (b, (m, s)) in self.mean.iter().zip(&self.std).enumerate() {
            let _ = writeln!(out, "{b},{m},{s}");
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self, PreprocessError> {
        let bad = |m: &str| PreprocessError::MalformedStats(m.to_string());
        let mut lines = text.lines();
        if lines.next() != Some("band,mean,std") {
            return Err(bad("missing header"));
        }
        let (mut mean, mut std) = (Vec::new(), Vec::new());
        for (i, line) in lines.filter(|l| !l.is_empty()).enumerate() {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 3 || f[0].parse::<usize>().ok() != Some(i) {
                return Err(bad(line));
            }
            let m: f64 = f[1].parse().map_err(|_| bad(line))?;
            let s: f64 = f[2].parse().map_err(|_| bad(line))?;
            if !m.is_finite() || !(s > 0.0) || !s.is_finite() {
                return Err(bad(line));
            }
            mean.push(m);
            std.push(s);
        }
        if mean.is_empty() {
            return Err(bad("no bands"));
        }
        Ok(Self { mean, std })
    }
}

/// Two-pass pooled statistics in fixed row-major accumulation order.
pub fn standardize_fit(matrix: &FeatureMatrix) -> Result<BandStats, PreprocessError> {
    if matrix.n_rows == 0 {
        return Err(PreprocessError::EmptyMatrix);
    }
    let (nb, nt) = (matrix.n_bands, matrix.n_steps);
    let count = (matrix.n_rows * nt) as f64;
    let mut sum = vec![0.0; nb];
    for r in 0..matrix.n_rows {
        let row = matrix.row(r);
        for b in 0..nb {
            sum[b] += row[b * nt..(b + 1) * nt].iter().sum::<f64>();
        }
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
    let mut sq = vec![0.0; nb];
    for r in 0..matrix.n_rows {
        let row = matrix.row(r);
        for b in 0..nb {
            sq[b] += row[b * nt..(b + 1) * nt].iter().map(|v| (v - mean[b]) * (v - mean[b])).sum::<f64>();
        }
    }
    let mut std = Vec::with_capacity(nb);
    for (b, s) in sq.iter().enumerate() {
        let sd = (s / count).sqrt();
        if !(sd > 0.0) || !sd.is_finite() {
            return Err(PreprocessError::ZeroVariance { band: b });
        }
        std.push(sd);
    }
    Ok(BandStats { mean, std })
}

pub fn standardize_apply(matrix: &FeatureMatrix, stats: &BandStats) -> Result<FeatureMatrix, PreprocessError> {
    if stats.n_bands() != matrix.n_bands {
        return Err(PreprocessError::BandMismatch { stats: stats.n_bands(), matrix: matrix.n_bands });
    }
    let nt = matrix.n_steps;
    let f = matrix.n_features();
    let mut out = matrix.clone();
    for row in out.data.chunks_mut(f) {
        for (b, band) in row.chunks_mut(nt).enumerate() {
            let (m, s) = (stats.mean[b], stats.std[b]);
            for v in band {
                *v = (*v - m) / s;
            }
        }
    }
    Ok(out)
}
