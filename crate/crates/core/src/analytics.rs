//! Landscape analytics on co-registered binary rasters: forest-loss
//! overlap, protected-area buffer profiles, hexagon density aggregation and
//! map-to-map agreement.
//!
//! Counting runs in parallel over row blocks and reduces integer counts, so
//! results never depend on the thread count.

use std::collections::BTreeMap;
use std::io;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::edt::squared_edt;
use crate::raster::{Grid, GridData, RasterError, RegionMask};

/// Last encoded loss year offset (2000 + 20 = 2020).
pub const MAX_LOSS_YEAR: u8 = 20;
pub const LOSS_BASE_YEAR: u16 = 2000;
pub const DEFAULT_HEX_SIDE_M: f64 = 80_000.0;

const ROW_BLOCK: usize = 64;

#[derive(Debug, Error)]
pub enum AnalyticsError {
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error("loss year value {value} at pixel {index} exceeds {MAX_LOSS_YEAR}")]
    InvalidLossYear { index: usize, value: u8 },
    #[error("protected-area mask is empty")]
    EmptyProtectedArea,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, AnalyticsError>;

/// Sums per-pixel contributions over row blocks in parallel.
fn count_rows<const N: usize>(width: usize, height: usize, f: impl Fn(usize) -> Option<usize> + Sync) -> [u64; N] {
    (0..height.div_ceil(ROW_BLOCK))
        .into_par_iter()
        .map(|b| {
            let mut acc = [0u64; N];
            for r in b * ROW_BLOCK..((b + 1) * ROW_BLOCK).min(height) {
                for i in r * width..(r + 1) * width {
                    if let Some(k) = f(i) {
                        acc[k] += 1;
                    }
                }
            }
            acc
        })
        .reduce(|| [0u64; N], |mut a, b| {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
            a
        })
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistanceField {
    /// Meters to the nearest mask pixel center; `+inf` when the mask is empty.
    pub grid: Grid,
    pub empty: bool,
}

/// Exact Euclidean distance, in meters, from every pixel center to the
/// nearest member pixel center of `mask`.
pub fn distance_transform(mask: &RegionMask) -> Result<DistanceField> {
    let members = mask.members();
    let empty = !members.iter().any(|&m| m);
    let d2 = squared_edt(&members, mask.width(), mask.height());
    let ps = mask.transform().pixel_size;
    let values = d2.iter().map(|&d| (d.sqrt() * ps) as f32).collect();
    let grid = Grid::new(
        mask.width(),
        mask.height(),
        mask.transform().clone(),
        GridData::F32(values),
        mask.grid().mask().map(<[bool]>::to_vec),
    )?;
    Ok(DistanceField { grid, empty })
}

/// Squared signed distance in pixel units: positive outside `region`
/// (to the nearest member), negative inside (to the nearest non-member).
fn signed_squared_distance(region: &RegionMask) -> Vec<f64> {
    let inside = region.members();
    let outside: Vec<bool> = inside.iter().map(|&m| !m).collect();
    let to_region = squared_edt(&inside, region.width(), region.height());
    let to_outside = squared_edt(&outside, region.width(), region.height());
    inside.iter().enumerate().map(|(i, &m)| if m { -to_outside[i] } else { to_region[i] }).collect()
}

/// Signed distance to the region boundary in meters (negative inside).
pub fn signed_distance(region: &RegionMask) -> Result<Grid> {
    let ps = region.transform().pixel_size;
    let values = signed_squared_distance(region).iter().map(|&d| (d.signum() * d.abs().sqrt() * ps) as f32).collect();
    Ok(Grid::new(region.width(), region.height(), region.transform().clone(), GridData::F32(values), region.grid().mask().map(<[bool]>::to_vec))?)
}

/// Annual forest-cover-loss raster: 0 = no loss, `v` in 1..=20 = loss in 2000 + v.
#[derive(Clone, Debug, PartialEq)]
pub struct LossYearGrid(Grid);

impl LossYearGrid {
    pub fn new(grid: Grid) -> Result<Self> {
        let v = grid.as_u8()?;
        if let Some(index) = (0..v.len()).find(|&i| grid.is_valid(i) && v[i] > MAX_LOSS_YEAR) {
            return Err(AnalyticsError::InvalidLossYear { index, value: v[index] });
        }
        Ok(LossYearGrid(grid))
    }

    pub fn grid(&self) -> &Grid {
        &self.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct YearArea {
    pub year: u16,
    pub pixels: u64,
    pub area_ha: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossOverlap {
    pub region_id: String,
    pub per_year: Vec<YearArea>,
    pub total_overlap_pixels: u64,
    /// Sum of the per-year areas in year order.
    pub total_overlap_ha: f64,
    pub tc_pixels: u64,
    pub tc_area_ha: f64,
    /// `None` when the region holds no tree crops.
    pub fraction_of_tc: Option<f64>,
}

/// Tree-crop area falling on forest-cover loss, by loss year, inside `region`.
/// Only pixels valid in all three rasters are counted.
pub fn loss_overlap(tc: &RegionMask, loss: &LossYearGrid, region: &RegionMask) -> Result<LossOverlap> {
    tc.check_aligned(loss.grid())?;
    tc.check_aligned(region.grid())?;
    let lv = loss.grid().as_u8()?;
    const SLOTS: usize = MAX_LOSS_YEAR as usize + 2;
    // slot 0: tc without loss, 1..=20: tc with loss in that year
    let counts: [u64; SLOTS] = count_rows(tc.width(), tc.height(), |i| {
        (loss.grid().is_valid(i) && region.contains(i) && tc.contains(i)).then_some(lv[i] as usize)
    });
    let ha = tc.transform().pixel_area_ha();
    let per_year: Vec<YearArea> = (1..=MAX_LOSS_YEAR as usize)
        .map(|v| YearArea { year: LOSS_BASE_YEAR + v as u16, pixels: counts[v], area_ha: counts[v] as f64 * ha })
        .collect();
    let total_overlap_pixels: u64 = per_year.iter().map(|y| y.pixels).sum();
    let total_overlap_ha = per_year.iter().map(|y| y.area_ha).sum();
    let tc_pixels = total_overlap_pixels + counts[0];
    Ok(LossOverlap {
        region_id: region.region_id().to_string(),
        per_year,
        total_overlap_pixels,
        total_overlap_ha,
        tc_pixels,
        tc_area_ha: tc_pixels as f64 * ha,
        fraction_of_tc: (tc_pixels > 0).then(|| total_overlap_pixels as f64 / tc_pixels as f64),
    })
}

pub fn write_loss_csv<W: io::Write>(overlap: &LossOverlap, mut out: W) -> io::Result<()> {
    writeln!(out, "year,area_ha")?;
    for y in &overlap.per_year {
        writeln!(out, "{},{}", y.year, y.area_ha)?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Inside,
    Outside,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BufferBand {
    pub side: Side,
    /// Signed band limits in meters; `lo_m < hi_m`.
    pub lo_m: f64,
    pub hi_m: f64,
    pub tc_pixels: u64,
    pub total_pixels: u64,
    pub density: f64,
    /// Band density over overall inside-PA density; `None` when that is 0.
    pub ratio: Option<f64>,
    /// Density over every band of the same side from the boundary up to and
    /// including this one.
    pub cumulative_density: f64,
    pub cumulative_ratio: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BufferProfile {
    /// Ordered from the deepest inside band to the farthest outside band.
    pub bands: Vec<BufferBand>,
    pub inside_tc_pixels: u64,
    pub inside_total_pixels: u64,
    pub inside_density: f64,
    pub out_of_range_pixels: u64,
    pub domain_pixels: u64,
}

/// Band `k` holds distances in `(k w, (k + 1) w]`; a distance on an edge
/// goes to the band nearer the boundary. Works on squared values so that
/// edges are decided exactly.
fn band_index(d2_px: f64, pixel_size: f64, band_width: f64) -> usize {
    let d2 = d2_px * pixel_size * pixel_size;
    let mut k = ((d2.sqrt() / band_width).ceil() as usize).saturating_sub(1);
    while k > 0 && d2 <= (k as f64 * band_width).powi(2) {
        k -= 1;
    }
    while d2 > ((k + 1) as f64 * band_width).powi(2) {
        k += 1;
    }
    k
}

/// Tree-crop density in successive signed-distance bands around protected
/// areas, relative to the density inside them.
///
/// `region` restricts the domain (all valid pixels when `None`).
pub fn pa_buffer_profile(
    tc: &RegionMask,
    pa: &RegionMask,
    band_width_m: f64,
    max_dist_m: f64,
    region: Option<&RegionMask>,
) -> Result<BufferProfile> {
    if !(band_width_m > 0.0) || !band_width_m.is_finite() {
        return Err(AnalyticsError::InvalidArgument(format!("band width must be > 0, got {band_width_m}")));
    }
    if !(max_dist_m > 0.0) || !max_dist_m.is_finite() {
        return Err(AnalyticsError::InvalidArgument(format!("max distance must be > 0, got {max_dist_m}")));
    }
    tc.check_aligned(pa.grid())?;
    if let Some(r) = region {
        tc.check_aligned(r.grid())?;
    }
    if pa.count() == 0 {
        return Err(AnalyticsError::EmptyProtectedArea);
    }
    let ps = tc.transform().pixel_size;
    let sd2 = signed_squared_distance(pa);
    let per_side = (max_dist_m / band_width_m).ceil() as usize;
    let max2 = max_dist_m * max_dist_m;
    let in_domain = |i: usize| tc.is_valid(i) && pa.is_valid(i) && region.map_or(true, |r| r.contains(i));

    // [inside bands][outside bands] x (tc, total), then out-of-range and inside totals
    let mut band_tc = vec![0u64; 2 * per_side];
    let mut band_total = vec![0u64; 2 * per_side];
    let (mut out_of_range, mut inside_tc, mut inside_total, mut domain) = (0u64, 0u64, 0u64, 0u64);
    for (i, &d) in sd2.iter().enumerate() {
        if !in_domain(i) {
            continue;
        }
        domain += 1;
        let is_tc = tc.contains(i) as u64;
        let inside = d < 0.0;
        if inside {
            inside_total += 1;
            inside_tc += is_tc;
        }
        let a = d.abs();
        if !a.is_finite() || a * ps * ps > max2 {
            out_of_range += 1;
            continue;
        }
        let k = band_index(a, ps, band_width_m);
        let slot = if inside { k } else { per_side + k };
        band_total[slot] += 1;
        band_tc[slot] += is_tc;
    }

    let inside_density = if inside_total > 0 { inside_tc as f64 / inside_total as f64 } else { 0.0 };
    let ratio = |density: f64| (inside_density > 0.0).then(|| density / inside_density);
    let density = |t: u64, n: u64| if n > 0 { t as f64 / n as f64 } else { 0.0 };

    let mut bands = Vec::with_capacity(2 * per_side);
    for k in (0..per_side).rev() {
        let (ct, cn) = (band_tc[..=k].iter().sum(), band_total[..=k].iter().sum());
        let d = density(band_tc[k], band_total[k]);
        let cd = density(ct, cn);
        bands.push(BufferBand {
            side: Side::Inside,
            lo_m: -((k + 1) as f64 * band_width_m).min(max_dist_m),
            hi_m: -(k as f64 * band_width_m),
            tc_pixels: band_tc[k],
            total_pixels: band_total[k],
            density: d,
            ratio: ratio(d),
            cumulative_density: cd,
            cumulative_ratio: ratio(cd),
        });
    }
    for k in 0..per_side {
        let s = per_side + k;
        let (ct, cn) = (band_tc[per_side..=s].iter().sum(), band_total[per_side..=s].iter().sum());
        let d = density(band_tc[s], band_total[s]);
        let cd = density(ct, cn);
        bands.push(BufferBand {
            side: Side::Outside,
            lo_m: k as f64 * band_width_m,
            hi_m: ((k + 1) as f64 * band_width_m).min(max_dist_m),
            tc_pixels: band_tc[s],
            total_pixels: band_total[s],
            density: d,
            ratio: ratio(d),
            cumulative_density: cd,
            cumulative_ratio: ratio(cd),
        });
    }
    Ok(BufferProfile {
        bands,
        inside_tc_pixels: inside_tc,
        inside_total_pixels: inside_total,
        inside_density,
        out_of_range_pixels: out_of_range,
        domain_pixels: domain,
    })
}

/// `band_lo_m,band_hi_m,density,ratio`; an undefined ratio is left empty.
pub fn write_profile_csv<W: io::Write>(profile: &BufferProfile, mut out: W) -> io::Result<()> {
    writeln!(out, "band_lo_m,band_hi_m,density,ratio")?;
    for b in &profile.bands {
        let ratio = b.ratio.map(|r| r.to_string()).unwrap_or_default();
        writeln!(out, "{},{},{},{}", b.lo_m, b.hi_m, b.density, ratio)?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HexCell {
    pub q: i64,
    pub r: i64,
    pub tc_pixels: u64,
    pub total_pixels: u64,
    pub density: f64,
}

/// Flat-top axial hex containing the point `(x, y)` relative to the
/// lattice origin, via cube rounding.
pub fn hex_of(x: f64, y: f64, side: f64) -> (i64, i64) {
    let qf = (2.0 / 3.0 * x) / side;
    let rf = (-1.0 / 3.0 * x + 3f64.sqrt() / 3.0 * y) / side;
    let sf = -qf - rf;
    let (mut q, mut r, s) = (qf.round(), rf.round(), sf.round());
    let (dq, dr, ds) = ((q - qf).abs(), (r - rf).abs(), (s - sf).abs());
    if dq > dr && dq > ds {
        q = -r - s;
    } else if dr > ds {
        r = -q - s;
    }
    (q as i64, r as i64)
}

/// Center of axial hex `(q, r)` relative to the lattice origin.
pub fn hex_center(q: i64, r: i64, side: f64) -> (f64, f64) {
    (side * 1.5 * q as f64, side * 3f64.sqrt() * (r as f64 + q as f64 / 2.0))
}

/// Assigns every valid pixel center to a flat-top hexagon of side `side_m`
/// anchored at the grid origin and reports tree-crop density per hexagon,
/// sorted by `(q, r)`.
pub fn hex_aggregate(tc: &RegionMask, side_m: f64, region: Option<&RegionMask>) -> Result<Vec<HexCell>> {
    if !(side_m > 0.0) || !side_m.is_finite() {
        return Err(AnalyticsError::InvalidArgument(format!("hexagon side must be > 0, got {side_m}")));
    }
    if let Some(r) = region {
        tc.check_aligned(r.grid())?;
    }
    let t = tc.transform();
    let w = tc.width();
    let partial: Vec<BTreeMap<(i64, i64), (u64, u64)>> = (0..tc.height().div_ceil(ROW_BLOCK))
        .into_par_iter()
        .map(|b| {
            let mut acc = BTreeMap::new();
            for row in b * ROW_BLOCK..((b + 1) * ROW_BLOCK).min(tc.height()) {
                for col in 0..w {
                    let i = row * w + col;
                    if !tc.is_valid(i) || region.is_some_and(|r| !r.contains(i)) {
                        continue;
                    }
                    let (x, y) = t.pixel_center(row, col);
                    let e: &mut (u64, u64) = acc.entry(hex_of(x - t.origin_x, y - t.origin_y, side_m)).or_default();
                    e.0 += tc.contains(i) as u64;
                    e.1 += 1;
                }
            }
            acc
        })
        .collect();
    let mut merged: BTreeMap<(i64, i64), (u64, u64)> = BTreeMap::new();
    for part in partial {
        for (k, (a, n)) in part {
            let e = merged.entry(k).or_default();
            e.0 += a;
            e.1 += n;
        }
    }
    Ok(merged
        .into_iter()
        .map(|((q, r), (tc_pixels, total_pixels))| HexCell { q, r, tc_pixels, total_pixels, density: tc_pixels as f64 / total_pixels as f64 })
        .collect())
}

pub fn write_hex_csv<W: io::Write>(cells: &[HexCell], mut out: W) -> io::Result<()> {
    writeln!(out, "q,r,density")?;
    for c in cells {
        writeln!(out, "{},{},{}", c.q, c.r, c.density)?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Agreement {
    pub pixels_11: u64,
    pub pixels_10: u64,
    pub pixels_01: u64,
    pub pixels_00: u64,
    pub area_11_ha: f64,
    pub area_10_ha: f64,
    pub area_01_ha: f64,
    pub area_00_ha: f64,
}

/// 2x2 cross-tabulation of two binary maps inside `region`: `10` means in
/// `a` and not in `b`.
pub fn map_agreement(a: &RegionMask, b: &RegionMask, region: &RegionMask) -> Result<Agreement> {
    a.check_aligned(b.grid())?;
    a.check_aligned(region.grid())?;
    let [p00, p01, p10, p11] = count_rows::<4>(a.width(), a.height(), |i| {
        (a.is_valid(i) && b.is_valid(i) && region.contains(i)).then(|| 2 * a.contains(i) as usize + b.contains(i) as usize)
    });
    let ha = a.transform().pixel_area_ha();
    Ok(Agreement {
        pixels_11: p11,
        pixels_10: p10,
        pixels_01: p01,
        pixels_00: p00,
        area_11_ha: p11 as f64 * ha,
        area_10_ha: p10 as f64 * ha,
        area_01_ha: p01 as f64 * ha,
        area_00_ha: p00 as f64 * ha,
    })
}
