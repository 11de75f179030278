//! Probability sampling designs for map assessment and training data.
//!
//! Covers buffer strata around mapped tree crops, stratified sample-size
//! targeting, allocation, seeded stratified random draws, cell-based
//! geographic splits and CutMix augmentation.
//!
//! Randomness comes from ChaCha8 (a counter-based generator): each stratum
//! draws from its own stream of the design seed, so draws are reproducible
//! across platforms and do not depend on scheduling.

use std::collections::{BTreeMap, BTreeSet};
use std::io;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assess;
use crate::edt::squared_edt;
use crate::labels;
use crate::raster::{Grid, RasterError, RegionMask};

/// Buffer radii by sampling region, in meters.
pub const BUFFER_RADIUS_M: [(&str, f64); 5] =
    [("BR", 300.0), ("CO", 500.0), ("EC", 1_000.0), ("CL", 1_000.0), ("other", 2_000.0)];

pub const DEFAULT_BUFFER_PER_REGION: u64 = 100;
pub const DEFAULT_TARGET_SE: f64 = 0.005;
pub const DEFAULT_CELL_KM: f64 = 100.0;
pub const DEFAULT_SPLIT_RATIOS: (f64, f64, f64) = (8.0, 1.0, 1.0);

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid design: {0}")]
    InvalidDesign(String),
    #[error("no strata to allocate to")]
    EmptyStrata,
    #[error("stratum {stratum} has {available} pixels, {requested} requested")]
    StratumExhausted { stratum: String, requested: u64, available: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("sample list error: {0}")]
    Csv(String),
}

impl From<csv::Error> for SamplerError {
    fn from(e: csv::Error) -> Self {
        SamplerError::Csv(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, SamplerError>;

/// Pixels within `radius_m` (Euclidean, center to center) of a tree-crop
/// pixel, excluding the tree-crop pixels themselves.
pub fn buffer_stratum(tc_mask: &RegionMask, radius_m: f64) -> Result<RegionMask> {
    if !(radius_m >= 0.0) || !radius_m.is_finite() {
        return Err(SamplerError::InvalidArgument(format!("radius must be >= 0, got {radius_m}")));
    }
    let (w, h) = (tc_mask.width(), tc_mask.height());
    let members = tc_mask.members();
    let d2 = squared_edt(&members, w, h);
    let ps = tc_mask.transform().pixel_size;
    let r2 = radius_m * radius_m;
    let buffer: Vec<u8> = (0..w * h)
        .map(|i| (tc_mask.is_valid(i) && !members[i] && d2[i] * ps * ps <= r2) as u8)
        .collect();
    let mut grid = Grid::from_u8(w, h, tc_mask.transform().clone(), buffer)?;
    if let Some(m) = tc_mask.grid().mask() {
        grid = grid.with_mask(m.to_vec())?;
    }
    Ok(RegionMask::new(grid, "buffer")?)
}

/// Stratified sample size for a target standard error of the estimated
/// class proportion: `n = ceil((sum_h W_h * S_h / SE)^2)`, with `S_h` the
/// per-stratum standard deviation.
pub fn sample_size(target_se: f64, strata: &[(f64, f64)]) -> Result<u64> {
    if !(target_se > 0.0) || !target_se.is_finite() {
        return Err(SamplerError::InvalidArgument(format!("target SE must be > 0, got {target_se}")));
    }
    if strata.iter().any(|&(w, s)| !(w >= 0.0) || !(s >= 0.0)) {
        return Err(SamplerError::InvalidArgument("weights and standard deviations must be >= 0".into()));
    }
    let spread: f64 = strata.iter().map(|&(w, s)| w * s).sum();
    if spread == 0.0 {
        return Err(SamplerError::InvalidArgument("all stratum standard deviations are zero".into()));
    }
    let n = (spread / target_se).powi(2);
    // absorb representation error so that e.g. (0.3 / 0.005)^2 gives 3600
    Ok((n * (1.0 - 1e-12)).ceil() as u64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AllocationScheme {
    /// Half of `n` to each stratum; an odd remainder goes to `tc`.
    EqualBetween { tc: String, non_tc: String },
    /// Proportional to area with largest-remainder rounding.
    Proportional(BTreeMap<String, f64>),
}

/// Stratum id to sample count.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Allocation(pub BTreeMap<String, u64>);

impl Allocation {
    pub fn total(&self) -> u64 {
        self.0.values().sum()
    }

    pub fn get(&self, stratum: &str) -> u64 {
        self.0.get(stratum).copied().unwrap_or(0)
    }
}

/// Integer apportionment of `n` by `weights` (Hamilton / largest remainder).
/// Ties in the remainder go to the earlier key.
pub fn largest_remainder(n: u64, weights: &BTreeMap<String, f64>) -> Result<BTreeMap<String, u64>> {
    if weights.is_empty() {
        return Err(SamplerError::EmptyStrata);
    }
    if weights.values().any(|&w| !(w >= 0.0) || !w.is_finite()) {
        return Err(SamplerError::InvalidArgument("areas must be finite and >= 0".into()));
    }
    let total: f64 = weights.values().sum();
    if total <= 0.0 {
        return Err(SamplerError::EmptyStrata);
    }
    let mut out = BTreeMap::new();
    let mut rema = Vec::with_capacity(weights.len());
    let mut assigned = 0u64;
    for (k, (key, &w)) in weights.iter().enumerate() {
        let quota = n as f64 * w / total;
        let base = quota.floor() as u64;
        assigned += base;
        out.insert(key.clone(), base);
        rema.push((quota - base as f64, k, key.clone()));
    }
    rema.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    for (_, _, key) in rema.into_iter().take(n.saturating_sub(assigned) as usize) {
        *out.get_mut(&key).unwrap() += 1;
    }
    Ok(out)
}

/// Allocates `n` samples by `scheme` and adds `buffer_per_region` samples
/// to each buffer stratum id in `buffer_strata`.
pub fn allocate(n: u64, scheme: &AllocationScheme, buffer_per_region: u64, buffer_strata: &[String]) -> Result<Allocation> {
    let mut alloc = match scheme {
        AllocationScheme::EqualBetween { tc, non_tc } => {
            if tc == non_tc {
                return Err(SamplerError::InvalidArgument("equal split needs two distinct strata".into()));
            }
            BTreeMap::from([(tc.clone(), n - n / 2), (non_tc.clone(), n / 2)])
        }
        AllocationScheme::Proportional(areas) => largest_remainder(n, areas)?,
    };
    for id in buffer_strata {
        if alloc.insert(id.clone(), buffer_per_region).is_some() {
            return Err(SamplerError::InvalidArgument(format!("buffer stratum {id} duplicates another stratum")));
        }
    }
    Ok(Allocation(alloc))
}

#[derive(Clone, Debug, PartialEq)]
pub struct StratumSpec {
    pub stratum_id: String,
    /// Map label recorded on samples drawn here (buffer strata are mapped
    /// non-tree-crop).
    pub map_class: String,
    pub mask: RegionMask,
    pub area_ha: f64,
    pub weight: f64,
}

impl StratumSpec {
    /// Builds strata with areas from pixel counts and weights from areas.
    pub fn from_masks(strata: Vec<(String, String, RegionMask)>) -> Result<Vec<StratumSpec>> {
        let areas: Vec<f64> = strata.iter().map(|(_, _, m)| m.area_ha()).collect();
        let weights = assess::stratum_weights(&areas).map_err(|e| SamplerError::InvalidDesign(e.to_string()))?;
        Ok(strata
            .into_iter()
            .zip(areas.into_iter().zip(weights))
            .map(|((stratum_id, map_class, mask), (area_ha, weight))| StratumSpec { stratum_id, map_class, mask, area_ha, weight })
            .collect())
    }
}

#[derive(Clone, Debug)]
pub struct SampleDesign {
    pub strata: Vec<StratumSpec>,
    pub allocation: Allocation,
    pub seed: u64,
}

impl SampleDesign {
    pub fn new(strata: Vec<StratumSpec>, allocation: Allocation, seed: u64) -> Result<Self> {
        if strata.is_empty() {
            return Err(SamplerError::EmptyStrata);
        }
        let wsum: f64 = strata.iter().map(|s| s.weight).sum();
        if (wsum - 1.0).abs() > 1e-9 {
            return Err(SamplerError::InvalidDesign(format!("stratum weights sum to {wsum}")));
        }
        let ids: BTreeSet<&str> = strata.iter().map(|s| s.stratum_id.as_str()).collect();
        if ids.len() != strata.len() {
            return Err(SamplerError::InvalidDesign("duplicate stratum ids".into()));
        }
        if let Some(k) = allocation.0.keys().find(|k| !ids.contains(k.as_str())) {
            return Err(SamplerError::InvalidDesign(format!("allocation names unknown stratum {k}")));
        }
        let first = &strata[0].mask;
        let mut seen = vec![false; first.len()];
        for s in &strata {
            s.mask.check_aligned(first.grid())?;
            for (i, slot) in seen.iter_mut().enumerate() {
                if s.mask.contains(i) {
                    if *slot {
                        return Err(SamplerError::InvalidDesign(format!("stratum {} overlaps another stratum", s.stratum_id)));
                    }
                    *slot = true;
                }
            }
        }
        Ok(SampleDesign { strata, allocation, seed })
    }

    pub fn total(&self) -> u64 {
        self.allocation.total()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplePoint {
    pub id: u64,
    pub x: f64,
    pub y: f64,
    pub stratum_id: String,
    pub map_class: String,
    /// `None` until a reference label is assigned.
    pub ref_class: Option<String>,
    pub split: Split,
}

fn stratum_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Uniform draw of `n` distinct indices from `0..len`; partial Fisher-Yates.
fn draw_without_replacement(rng: &mut ChaCha8Rng, mut pool: Vec<usize>, n: usize) -> Vec<usize> {
    let len = pool.len();
    for j in 0..n {
        let k = j + rng.gen_range(0..(len - j) as u64) as usize;
        pool.swap(j, k);
    }
    pool.truncate(n);
    pool
}

/// Stratified random sample of pixel centers: within each stratum a uniform
/// draw without replacement, stratum `k` using stream `k` of the seed.
pub fn stratified_sample(design: &SampleDesign) -> Result<Vec<SamplePoint>> {
    let per_stratum: Vec<Vec<(f64, f64)>> = design
        .strata
        .par_iter()
        .enumerate()
        .map(|(k, s)| {
            let n = design.allocation.get(&s.stratum_id);
            if n == 0 {
                return Ok(Vec::new());
            }
            let pool: Vec<usize> = (0..s.mask.len()).filter(|&i| s.mask.contains(i)).collect();
            if (pool.len() as u64) < n {
                return Err(SamplerError::StratumExhausted { stratum: s.stratum_id.clone(), requested: n, available: pool.len() });
            }
            let mut rng = stratum_rng(design.seed, k as u64);
            let w = s.mask.width();
            let t = s.mask.transform();
            Ok(draw_without_replacement(&mut rng, pool, n as usize)
                .into_iter()
                .map(|i| t.pixel_center(i / w, i % w))
                .collect())
        })
        .collect::<Result<_>>()?;

    let mut points = Vec::with_capacity(design.total() as usize);
    for (s, coords) in design.strata.iter().zip(per_stratum) {
        for (x, y) in coords {
            points.push(SamplePoint {
                id: points.len() as u64,
                x,
                y,
                stratum_id: s.stratum_id.clone(),
                map_class: s.map_class.clone(),
                ref_class: None,
                split: Split::None,
            });
        }
    }
    Ok(points)
}

/// SplitMix64 finalizer.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn cell_key(seed: u64, cell: (i64, i64)) -> u64 {
    mix64(mix64(seed ^ mix64(cell.0 as u64)) ^ (cell.1 as u64))
}

/// Assigns whole `cell_km` x `cell_km` cells to train/val/test.
///
/// Occupied cells are put in a seeded random order and cut into three runs
/// whose lengths apportion the cell count by `ratios`. Every point inherits
/// its cell's split; the result does not depend on point order.
pub fn geo_split(points: &[SamplePoint], cell_km: f64, ratios: (f64, f64, f64), seed: u64) -> Result<Vec<SamplePoint>> {
    if !(cell_km > 0.0) || !cell_km.is_finite() {
        return Err(SamplerError::InvalidArgument(format!("cell size must be > 0, got {cell_km}")));
    }
    let r = [ratios.0, ratios.1, ratios.2];
    if r.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
        return Err(SamplerError::InvalidArgument(format!("split ratios must be positive, got {ratios:?}")));
    }
    let cell_m = cell_km * 1000.0;
    let cell_of = |p: &SamplePoint| ((p.x / cell_m).floor() as i64, (p.y / cell_m).floor() as i64);
    let cells: BTreeSet<(i64, i64)> = points.iter().map(cell_of).collect();
    let mut order: Vec<(u64, (i64, i64))> = cells.into_iter().map(|c| (cell_key(seed, c), c)).collect();
    order.sort_unstable();

    let quotas = largest_remainder(
        order.len() as u64,
        &BTreeMap::from([("0".to_string(), r[0]), ("1".to_string(), r[1]), ("2".to_string(), r[2])]),
    )?;
    let (n_train, n_val) = (quotas["0"] as usize, quotas["1"] as usize);
    let assignment: BTreeMap<(i64, i64), Split> = order
        .into_iter()
        .enumerate()
        .map(|(k, (_, cell))| {
            let split = if k < n_train {
                Split::Train
            } else if k < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
            (cell, split)
        })
        .collect();
    Ok(points.iter().map(|p| SamplePoint { split: assignment[&cell_of(p)], ..p.clone() }).collect())
}

const CSV_HEADER: [&str; 7] = ["id", "x", "y", "stratum_id", "map_class", "ref_class", "split"];

fn split_name(s: Split) -> &'static str {
    match s {
        Split::Train => "train",
        Split::Val => "val",
        Split::Test => "test",
        Split::None => "none",
    }
}

/// Writes `id,x,y,stratum_id,map_class,ref_class,split`; a missing
/// reference label is written as `unknown`.
pub fn write_samples_csv<W: io::Write>(points: &[SamplePoint], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for p in points {
        w.write_record([
            p.id.to_string(),
            p.x.to_string(),
            p.y.to_string(),
            p.stratum_id.clone(),
            p.map_class.clone(),
            p.ref_class.clone().unwrap_or_else(|| labels::UNKNOWN.to_string()),
            split_name(p.split).to_string(),
        ])?;
    }
    w.flush().map_err(|e| SamplerError::Csv(e.to_string()))?;
    Ok(())
}

pub fn read_samples_csv<R: io::Read>(input: R) -> Result<Vec<SamplePoint>> {
    let mut r = csv::Reader::from_reader(input);
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != CSV_HEADER {
        return Err(SamplerError::Csv(format!("expected header {CSV_HEADER:?}, got {header:?}")));
    }
    let mut out = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let bad = |what: &str| SamplerError::Csv(format!("row {}: invalid {what}", line + 1));
        let label = |s: &str, what: &str| {
            if labels::is_known_label(s) {
                Ok(s.to_string())
            } else {
                Err(bad(what))
            }
        };
        let ref_class = match &rec[5] {
            l if l == labels::UNKNOWN || l.is_empty() => None,
            l => Some(label(l, "ref_class")?),
        };
        out.push(SamplePoint {
            id: rec[0].parse().map_err(|_| bad("id"))?,
            x: rec[1].parse().map_err(|_| bad("x"))?,
            y: rec[2].parse().map_err(|_| bad("y"))?,
            stratum_id: rec[3].to_string(),
            map_class: label(&rec[4], "map_class")?,
            ref_class,
            split: match &rec[6] {
                "train" => Split::Train,
                "val" => Split::Val,
                "test" => Split::Test,
                "none" => Split::None,
                _ => return Err(bad("split")),
            },
        });
    }
    Ok(out)
}

/// A training patch: `planes` holds every band of every season as an
/// `height x width` row-major plane; `labels` is the matching label plane.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSample {
    pub height: usize,
    pub width: usize,
    pub planes: Vec<Vec<f32>>,
    pub labels: Vec<u8>,
}

impl PatchSample {
    pub fn new(height: usize, width: usize, planes: Vec<Vec<f32>>, labels: Vec<u8>) -> Result<Self> {
        let n = height * width;
        if labels.len() != n || planes.iter().any(|p| p.len() != n) {
            return Err(SamplerError::ShapeMismatch(format!("planes and labels must hold {n} pixels")));
        }
        Ok(PatchSample { height, width, planes, labels })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    #[inline]
    pub fn contains(&self, r: usize, c: usize) -> bool {
        r >= self.row && r < self.row + self.height && c >= self.col && c < self.col + self.width
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CutMixConfig {
    pub min_area_fraction: f64,
    pub max_area_fraction: f64,
}

impl Default for CutMixConfig {
    fn default() -> Self {
        CutMixConfig { min_area_fraction: 0.1, max_area_fraction: 0.5 }
    }
}

/// Box with area fraction ~ U[min, max] (sides scaled by its square root)
/// and a uniformly placed top-left corner.
pub fn cutmix_rect(height: usize, width: usize, config: &CutMixConfig, seed: u64) -> Result<Rect> {
    let (lo, hi) = (config.min_area_fraction, config.max_area_fraction);
    if !(0.0..=1.0).contains(&lo) || !(lo..=1.0).contains(&hi) {
        return Err(SamplerError::InvalidArgument(format!("bad area fraction range [{lo}, {hi}]")));
    }
    if height == 0 || width == 0 {
        return Err(SamplerError::ShapeMismatch("empty patch".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frac = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
    let side = frac.sqrt();
    let rh = ((height as f64 * side).round() as usize).clamp(1, height);
    let rw = ((width as f64 * side).round() as usize).clamp(1, width);
    let row = rng.gen_range(0..=(height - rh) as u64) as usize;
    let col = rng.gen_range(0..=(width - rw) as u64) as usize;
    Ok(Rect { row, col, height: rh, width: rw })
}

/// `a` outside `rect`, `b` inside, for every plane and the label plane.
pub fn cutmix_with_rect(a: &PatchSample, b: &PatchSample, rect: Rect) -> Result<PatchSample> {
    if a.height != b.height || a.width != b.width || a.planes.len() != b.planes.len() {
        return Err(SamplerError::ShapeMismatch(format!(
            "{}x{}x{} vs {}x{}x{}",
            a.planes.len(),
            a.height,
            a.width,
            b.planes.len(),
            b.height,
            b.width
        )));
    }
    let mut out = a.clone();
    let r_end = (rect.row + rect.height).min(a.height);
    let c_end = (rect.col + rect.width).min(a.width);
    for r in rect.row.min(r_end)..r_end {
        let span = r * a.width + rect.col..r * a.width + c_end;
        for (dst, src) in out.planes.iter_mut().zip(&b.planes) {
            dst[span.clone()].copy_from_slice(&src[span.clone()]);
        }
        out.labels[span.clone()].copy_from_slice(&b.labels[span]);
    }
    Ok(out)
}

pub fn cutmix(a: &PatchSample, b: &PatchSample, config: &CutMixConfig, seed: u64) -> Result<(PatchSample, Rect)> {
    let rect = cutmix_rect(a.height, a.width, config, seed)?;
    Ok((cutmix_with_rect(a, b, rect)?, rect))
}
