//! Ensemble fusion, entropy-based uncertainty and calibration error.

use std::io;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::{Grid, GridData, GridTransform, RasterError, RegionMask};

pub const DEFAULT_ECE_BINS: usize = 12;

#[derive(Debug, Error)]
pub enum CalibrateError {
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("unknown class {0}")]
    UnknownClass(String),
    #[error("no samples")]
    Empty,
}

pub type Result<T> = std::result::Result<T, CalibrateError>;

/// Per-pixel class probabilities. `planes[k][i]` is the score of class `k`
/// at pixel `i`; invalid pixels hold zeros.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityField {
    pub width: usize,
    pub height: usize,
    pub transform: GridTransform,
    pub class_labels: Vec<String>,
    pub planes: Vec<Vec<f32>>,
    pub valid: Vec<bool>,
}

impl ProbabilityField {
    pub fn classes(&self) -> usize {
        self.class_labels.len()
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn pixel(&self, i: usize) -> Vec<f64> {
        self.planes.iter().map(|p| p[i] as f64).collect()
    }

    pub fn class_index(&self, label: &str) -> Result<usize> {
        self.class_labels.iter().position(|c| c == label).ok_or_else(|| CalibrateError::UnknownClass(label.into()))
    }

    /// Index of the highest score; ties go to the lowest class index.
    pub fn argmax(&self, i: usize) -> Option<usize> {
        if !self.valid[i] {
            return None;
        }
        let mut best = 0;
        for k in 1..self.planes.len() {
            if self.planes[k][i] > self.planes[best][i] {
                best = k;
            }
        }
        Some(best)
    }

    pub fn to_grids(&self) -> Result<Vec<Grid>> {
        self.planes
            .iter()
            .map(|p| {
                Ok(Grid::new(self.width, self.height, self.transform.clone(), GridData::F32(p.clone()), Some(self.valid.clone()))?)
            })
            .collect()
    }
}

/// Max-subtracted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / sum).collect()
}

/// Averages member logits per pixel and class, then applies softmax.
/// A pixel is valid only where every member plane is valid.
pub fn ensemble_fuse(members: &[Vec<Grid>], class_labels: &[String]) -> Result<ProbabilityField> {
    let first = members.first().ok_or_else(|| CalibrateError::InvalidArgument("no ensemble members".into()))?;
    let k = class_labels.len();
    if k == 0 {
        return Err(CalibrateError::InvalidArgument("no classes".into()));
    }
    let reference = first.first().ok_or_else(|| CalibrateError::ShapeMismatch("member has no planes".into()))?;
    for (m, member) in members.iter().enumerate() {
        if member.len() != k {
            return Err(CalibrateError::ShapeMismatch(format!("member {m} has {} planes, expected {k}", member.len())));
        }
        for plane in member {
            plane.check_aligned(reference).map_err(|e| CalibrateError::ShapeMismatch(format!("member {m}: {e}")))?;
        }
    }
    let n = reference.len();
    let valid: Vec<bool> = (0..n).map(|i| members.iter().all(|m| m.iter().all(|g| g.is_valid(i)))).collect();
    let scale = 1.0 / members.len() as f64;
    let probs: Vec<Vec<f32>> = (0..n)
        .into_par_iter()
        .map(|i| {
            if !valid[i] {
                return vec![0.0; k];
            }
            let mean: Vec<f64> = (0..k).map(|c| members.iter().map(|m| m[c].get_f64(i)).sum::<f64>() * scale).collect();
            softmax(&mean).into_iter().map(|p| p as f32).collect()
        })
        .collect();
    let mut planes = vec![vec![0.0f32; n]; k];
    for (i, p) in probs.into_iter().enumerate() {
        for (c, v) in p.into_iter().enumerate() {
            planes[c][i] = v;
        }
    }
    Ok(ProbabilityField {
        width: reference.width(),
        height: reference.height(),
        transform: reference.transform().clone(),
        class_labels: class_labels.to_vec(),
        planes,
        valid,
    })
}

/// `-sum p ln p / ln K` with `0 ln 0 = 0`, clamped to `[0, 1]`. One class
/// gives 0.
pub fn normalized_entropy(p: &[f64]) -> f64 {
    if p.len() <= 1 {
        return 0.0;
    }
    let h: f64 = -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>();
    if h <= 0.0 {
        return 0.0;
    }
    (h / (p.len() as f64).ln()).min(1.0)
}

/// Normalized entropy per valid pixel.
pub fn entropy_map(p: &ProbabilityField) -> Result<Grid> {
    let values: Vec<f32> = (0..p.len())
        .into_par_iter()
        .map(|i| if p.valid[i] { normalized_entropy(&p.pixel(i)) as f32 } else { 0.0 })
        .collect();
    Ok(Grid::new(p.width, p.height, p.transform.clone(), GridData::F32(values), Some(p.valid.clone()))?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBin {
    pub bin_lo: f64,
    pub bin_hi: f64,
    pub count: u64,
    pub mean_confidence: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityTable {
    pub bins: Vec<ReliabilityBin>,
    pub n: u64,
    pub ece: f64,
}

pub fn ece(confidence: &[f64], correct: &[bool], bins: usize) -> Result<ReliabilityTable> {
    ece_in_range(confidence, correct, bins, 0.0, 1.0)
}

/// Expected calibration error over `bins` equal-width bins on `[lo, hi]`.
/// Bins are left-closed and right-open except the last, which is closed.
pub fn ece_in_range(confidence: &[f64], correct: &[bool], bins: usize, lo: f64, hi: f64) -> Result<ReliabilityTable> {
    if confidence.len() != correct.len() {
        return Err(CalibrateError::ShapeMismatch(format!("{} confidences vs {} outcomes", confidence.len(), correct.len())));
    }
    if confidence.is_empty() {
        return Err(CalibrateError::Empty);
    }
    if bins == 0 || !(hi > lo) {
        return Err(CalibrateError::InvalidArgument(format!("need bins >= 1 and lo < hi, got {bins} on [{lo}, {hi}]")));
    }
    let width = hi - lo;
    let mut count = vec![0u64; bins];
    let mut conf_sum = vec![0.0f64; bins];
    let mut hits = vec![0u64; bins];
    for (&c, &ok) in confidence.iter().zip(correct) {
        if !(lo..=hi).contains(&c) {
            return Err(CalibrateError::InvalidArgument(format!("confidence {c} outside [{lo}, {hi}]")));
        }
        let b = (((c - lo) / width * bins as f64).floor() as usize).min(bins - 1);
        count[b] += 1;
        conf_sum[b] += c;
        hits[b] += ok as u64;
    }
    let n = confidence.len() as u64;
    let mut ece = 0.0;
    let rows = (0..bins)
        .map(|b| {
            let (mean_confidence, accuracy) = if count[b] == 0 {
                (0.0, 0.0)
            } else {
                (conf_sum[b] / count[b] as f64, hits[b] as f64 / count[b] as f64)
            };
            if count[b] > 0 {
                ece += count[b] as f64 / n as f64 * (accuracy - mean_confidence).abs();
            }
            ReliabilityBin {
                bin_lo: lo + width * b as f64 / bins as f64,
                bin_hi: lo + width * (b + 1) as f64 / bins as f64,
                count: count[b],
                mean_confidence,
                accuracy,
            }
        })
        .collect();
    Ok(ReliabilityTable { bins: rows, n, ece })
}

/// `bin_lo,bin_hi,count,mean_conf,accuracy` rows followed by a `# ece=` line.
pub fn write_reliability_csv<W: io::Write>(table: &ReliabilityTable, mut out: W) -> io::Result<()> {
    writeln!(out, "bin_lo,bin_hi,count,mean_conf,accuracy")?;
    for b in &table.bins {
        writeln!(out, "{},{},{},{},{}", b.bin_lo, b.bin_hi, b.count, b.mean_confidence, b.accuracy)?;
    }
    writeln!(out, "# ece={}", table.ece)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMode {
    /// Member where the class has the highest score.
    Argmax,
    /// Member where the class score is at least the given value.
    AtLeast(f64),
}

pub fn threshold_mask(p: &ProbabilityField, class: &str, mode: ThresholdMode) -> Result<RegionMask> {
    let k = p.class_index(class)?;
    let members: Vec<u8> = (0..p.len())
        .map(|i| {
            let hit = match mode {
                ThresholdMode::Argmax => p.argmax(i) == Some(k),
                ThresholdMode::AtLeast(t) => p.valid[i] && p.planes[k][i] as f64 >= t,
            };
            hit as u8
        })
        .collect();
    let grid = Grid::from_u8(p.width, p.height, p.transform.clone(), members)?.with_mask(p.valid.clone())?;
    Ok(RegionMask::new(grid, class)?)
}
