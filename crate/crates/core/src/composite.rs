//! Seasonal compositing of image time series and robust channel
//! normalization.
//!
//! Optical stacks are cloud-screened per observation and reduced with a
//! per-pixel median; radar stacks are reduced with a mean. Both produce
//! four seasonal images, one per window of a partition of the calendar
//! year into consecutive months.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use chrono::{Datelike, NaiveDate};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ntg1::{self, FormatError};
use crate::raster::{Grid, GridData, GridTransform, RasterError};

/// Band order produced by [`stack_radar_channels`].
pub const RADAR_BANDS: [&str; 5] = ["VV_a", "VH_a", "VV_d", "VH_d", "incidence"];

/// Default cloud screening threshold: observations whose contaminated
/// fraction exceeds this are discarded.
pub const DEFAULT_MAX_CLOUD_FRACTION: f64 = 0.40;

pub const DEFAULT_MAD_FLOOR: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum CompositeError {
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("invalid observation stack: {0}")]
    InvalidStack(String),
    #[error("invalid season windows: {0}")]
    InvalidWindows(String),
    #[error("missing {0} pass")]
    MissingPass(&'static str),
    #[error("channel count mismatch: expected {expected}, found {found}")]
    ChannelMismatch { expected: usize, found: usize },
    #[error("channel {0} has no valid pixels")]
    EmptyChannel(usize),
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, CompositeError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Optical,
    Radar,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reducer {
    Median,
    Mean,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub date: NaiveDate,
    pub bands: Vec<Grid>,
    /// `true` = contaminated.
    pub cloud_mask: Vec<bool>,
}

impl Observation {
    /// Pixel `idx` of `band` is usable: not cloudy and valid in the band.
    #[inline]
    pub fn usable(&self, band: usize, idx: usize) -> bool {
        !self.cloud_mask[idx] && self.bands[band].is_valid(idx)
    }

    /// Fraction of contaminated pixels over the extent valid in every band.
    /// An observation with no valid extent counts as fully contaminated.
    pub fn cloud_fraction(&self) -> f64 {
        let n = self.cloud_mask.len();
        let (mut valid, mut cloudy) = (0usize, 0usize);
        for i in 0..n {
            if self.bands.iter().all(|b| b.is_valid(i)) {
                valid += 1;
                cloudy += self.cloud_mask[i] as usize;
            }
        }
        if valid == 0 {
            1.0
        } else {
            cloudy as f64 / valid as f64
        }
    }
}

/// Time-ordered observations sharing one pixel grid and band layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationStack {
    modality: Modality,
    band_names: Vec<String>,
    width: usize,
    height: usize,
    transform: GridTransform,
    observations: Vec<Observation>,
}

impl ObservationStack {
    pub fn new(
        modality: Modality,
        band_names: Vec<String>,
        width: usize,
        height: usize,
        transform: GridTransform,
        observations: Vec<Observation>,
    ) -> Result<Self> {
        if band_names.is_empty() {
            return Err(CompositeError::InvalidStack("no bands".into()));
        }
        let n = width * height;
        for (k, obs) in observations.iter().enumerate() {
            if obs.bands.len() != band_names.len() {
                return Err(CompositeError::InvalidStack(format!(
                    "observation {k} has {} bands, expected {}",
                    obs.bands.len(),
                    band_names.len()
                )));
            }
            if obs.cloud_mask.len() != n {
                return Err(CompositeError::InvalidStack(format!("observation {k} cloud mask has wrong size")));
            }
            for band in &obs.bands {
                if band.width() != width || band.height() != height || band.transform() != &transform {
                    return Err(CompositeError::Raster(RasterError::TransformMismatch(format!(
                        "observation {k} ({}) is not on the stack grid",
                        obs.date
                    ))));
                }
            }
            if k > 0 && obs.date <= observations[k - 1].date {
                return Err(CompositeError::InvalidStack(format!(
                    "timestamps not strictly increasing at {}",
                    obs.date
                )));
            }
        }
        Ok(ObservationStack { modality, band_names, width, height, transform, observations })
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn band_names(&self) -> &[String] {
        &self.band_names
    }

    pub fn band_count(&self) -> usize {
        self.band_names.len()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn transform(&self) -> &GridTransform {
        &self.transform
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }
}

/// Drops observations whose contaminated fraction exceeds `max_cloud_fraction`.
pub fn cloud_filter(stack: &ObservationStack, max_cloud_fraction: f64) -> Result<ObservationStack> {
    if !(0.0..=1.0).contains(&max_cloud_fraction) {
        return Err(CompositeError::InvalidArgument(format!(
            "max_cloud_fraction must be in [0, 1], got {max_cloud_fraction}"
        )));
    }
    let kept = stack
        .observations
        .iter()
        .filter(|o| o.cloud_fraction() <= max_cloud_fraction)
        .cloned()
        .collect();
    Ok(ObservationStack { observations: kept, ..stack.clone() })
}

/// Inclusive month range; `first > last` wraps over the year end.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MonthRange {
    pub first: u32,
    pub last: u32,
}

impl MonthRange {
    pub fn contains(&self, month: u32) -> bool {
        if self.first <= self.last {
            (self.first..=self.last).contains(&month)
        } else {
            month >= self.first || month <= self.last
        }
    }
}

/// Four month windows partitioning the calendar year.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<MonthRange>", into = "Vec<MonthRange>")]
pub struct SeasonWindows([MonthRange; 4]);

impl SeasonWindows {
    pub fn new(windows: [MonthRange; 4]) -> Result<Self> {
        for w in &windows {
            if !(1..=12).contains(&w.first) || !(1..=12).contains(&w.last) {
                return Err(CompositeError::InvalidWindows(format!("month out of range in {w:?}")));
            }
        }
        for month in 1..=12 {
            let hits = windows.iter().filter(|w| w.contains(month)).count();
            if hits != 1 {
                return Err(CompositeError::InvalidWindows(format!("month {month} covered {hits} times")));
            }
        }
        Ok(SeasonWindows(windows))
    }

    /// Jan-Mar, Apr-Jun, Jul-Sep, Oct-Dec.
    pub fn quarters() -> Self {
        SeasonWindows([
            MonthRange { first: 1, last: 3 },
            MonthRange { first: 4, last: 6 },
            MonthRange { first: 7, last: 9 },
            MonthRange { first: 10, last: 12 },
        ])
    }

    pub fn ranges(&self) -> &[MonthRange; 4] {
        &self.0
    }

    pub fn season_of(&self, date: NaiveDate) -> usize {
        let m = date.month();
        self.0.iter().position(|w| w.contains(m)).expect("windows partition the year")
    }
}

impl Default for SeasonWindows {
    fn default() -> Self {
        Self::quarters()
    }
}

impl TryFrom<Vec<MonthRange>> for SeasonWindows {
    type Error = CompositeError;

    fn try_from(v: Vec<MonthRange>) -> Result<Self> {
        let arr: [MonthRange; 4] = v
            .try_into()
            .map_err(|v: Vec<MonthRange>| CompositeError::InvalidWindows(format!("expected 4 windows, got {}", v.len())))?;
        SeasonWindows::new(arr)
    }
}

impl From<SeasonWindows> for Vec<MonthRange> {
    fn from(w: SeasonWindows) -> Self {
        w.0.to_vec()
    }
}

/// Four seasonal multi-band images. `seasons[s][b]` is an f32 grid whose
/// validity marks pixels that had data for band `b` in season `s`;
/// `fill[s][i]` is set where some band had no usable observation.
#[derive(Clone, Debug, PartialEq)]
pub struct SeasonalComposite {
    pub band_names: Vec<String>,
    pub reducer: Reducer,
    pub windows: SeasonWindows,
    pub seasons: Vec<Vec<Grid>>,
    pub fill: Vec<Vec<bool>>,
}

impl SeasonalComposite {
    pub fn band_count(&self) -> usize {
        self.band_names.len()
    }

    pub fn fill_count(&self) -> usize {
        self.fill.iter().flatten().filter(|&&f| f).count()
    }

    pub fn width(&self) -> usize {
        self.seasons[0][0].width()
    }

    pub fn height(&self) -> usize {
        self.seasons[0][0].height()
    }

    pub fn transform(&self) -> &GridTransform {
        self.seasons[0][0].transform()
    }

    /// Values as a `T x H x W x C` row-major tensor (season, row, col, band).
    pub fn to_thwc(&self) -> Vec<f32> {
        let (h, w, c) = (self.height(), self.width(), self.band_count());
        let mut out = vec![0.0f32; self.seasons.len() * h * w * c];
        for (s, bands) in self.seasons.iter().enumerate() {
            for (b, grid) in bands.iter().enumerate() {
                let v = grid.as_f32().expect("composite bands are f32");
                for i in 0..h * w {
                    out[(s * h * w + i) * c + b] = v[i];
                }
            }
        }
        out
    }
}

/// Median of a non-empty slice; even counts take the mean of the two central
/// values. Reorders the slice.
pub fn median_in_place(values: &mut [f64]) -> f64 {
    debug_assert!(!values.is_empty());
    values.sort_unstable_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

fn reduce(reducer: Reducer, values: &mut [f64]) -> f64 {
    match reducer {
        Reducer::Median => median_in_place(values),
        Reducer::Mean => values.iter().sum::<f64>() / values.len() as f64,
    }
}

/// Per-pixel, per-band reduction over the usable observations of each
/// season window.
pub fn seasonal_composite(stack: &ObservationStack, reducer: Reducer, windows: &SeasonWindows) -> Result<SeasonalComposite> {
    let n = stack.width * stack.height;
    let nb = stack.band_count();
    let mut members: [Vec<&Observation>; 4] = Default::default();
    for obs in &stack.observations {
        members[windows.season_of(obs.date)].push(obs);
    }

    let mut seasons = Vec::with_capacity(4);
    let mut fill = Vec::with_capacity(4);
    for obs in &members {
        let mut season_fill = vec![false; n];
        let mut bands = Vec::with_capacity(nb);
        for b in 0..nb {
            let reduced: Vec<Option<f32>> = (0..n)
                .into_par_iter()
                .map_init(Vec::new, |buf: &mut Vec<f64>, i| {
                    buf.clear();
                    buf.extend(obs.iter().filter(|o| o.usable(b, i)).map(|o| o.bands[b].get_f64(i)));
                    (!buf.is_empty()).then(|| reduce(reducer, buf) as f32)
                })
                .collect();
            let values = reduced.iter().map(|v| v.unwrap_or(0.0)).collect();
            let mask: Vec<bool> = reduced.iter().map(Option::is_some).collect();
            for (f, &ok) in season_fill.iter_mut().zip(&mask) {
                *f |= !ok;
            }
            bands.push(Grid::new(stack.width, stack.height, stack.transform.clone(), GridData::F32(values), Some(mask))?);
        }
        seasons.push(bands);
        fill.push(season_fill);
    }
    Ok(SeasonalComposite { band_names: stack.band_names.clone(), reducer, windows: windows.clone(), seasons, fill })
}

fn invalid_band_like(template: &Grid) -> Result<Grid> {
    Ok(Grid::new(
        template.width(),
        template.height(),
        template.transform().clone(),
        GridData::F32(vec![0.0; template.len()]),
        Some(vec![false; template.len()]),
    )?)
}

fn with_cloud_folded(band: &Grid, cloud: &[bool]) -> Result<Grid> {
    if !cloud.iter().any(|&c| c) {
        return Ok(band.clone());
    }
    let mask = (0..band.len()).map(|i| band.is_valid(i) && !cloud[i]).collect();
    Ok(band.clone().with_mask(mask)?)
}

/// Merges ascending and descending radar passes and the incidence-angle
/// grid into one five-band stack ordered `[VV_a, VH_a, VV_d, VH_d, incidence]`.
///
/// Dates present in only one pass carry invalid bands for the other; the
/// seasonal mean then reduces each band over its own pass.
pub fn stack_radar_channels(asc: &ObservationStack, desc: &ObservationStack, incidence: &Grid) -> Result<ObservationStack> {
    if asc.is_empty() {
        return Err(CompositeError::MissingPass("ascending"));
    }
    if desc.is_empty() {
        return Err(CompositeError::MissingPass("descending"));
    }
    for (name, s) in [("ascending", asc), ("descending", desc)] {
        if s.band_count() != 2 {
            return Err(CompositeError::InvalidStack(format!(
                "{name} pass must carry exactly VV and VH, found {} bands",
                s.band_count()
            )));
        }
        if s.width != incidence.width() || s.height != incidence.height() || &s.transform != incidence.transform() {
            return Err(CompositeError::Raster(RasterError::TransformMismatch(format!(
                "{name} pass is not aligned with the incidence grid"
            ))));
        }
    }

    let mut by_date: BTreeMap<NaiveDate, (Option<&Observation>, Option<&Observation>)> = BTreeMap::new();
    for o in asc.observations() {
        by_date.entry(o.date).or_default().0 = Some(o);
    }
    for o in desc.observations() {
        by_date.entry(o.date).or_default().1 = Some(o);
    }

    let n = incidence.len();
    let mut observations = Vec::with_capacity(by_date.len());
    for (date, (a, d)) in by_date {
        let mut bands = Vec::with_capacity(5);
        for pass in [a, d] {
            match pass {
                Some(o) => {
                    for band in &o.bands {
                        bands.push(with_cloud_folded(band, &o.cloud_mask)?);
                    }
                }
                None => {
                    bands.push(invalid_band_like(incidence)?);
                    bands.push(invalid_band_like(incidence)?);
                }
            }
        }
        bands.push(incidence.clone());
        observations.push(Observation { date, bands, cloud_mask: vec![false; n] });
    }
    ObservationStack::new(
        Modality::Radar,
        RADAR_BANDS.iter().map(|s| s.to_string()).collect(),
        incidence.width(),
        incidence.height(),
        incidence.transform().clone(),
        observations,
    )
}

/// Per-channel robust location and scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub median: Vec<f64>,
    pub mad: Vec<f64>,
    pub epsilon_floor: f64,
}

impl ChannelStats {
    pub fn channels(&self) -> usize {
        self.median.len()
    }
}

fn stats_from_values(mut per_channel: Vec<Vec<f64>>, epsilon_floor: f64) -> Result<ChannelStats> {
    let mut median = Vec::with_capacity(per_channel.len());
    let mut mad = Vec::with_capacity(per_channel.len());
    for (c, values) in per_channel.iter_mut().enumerate() {
        if values.is_empty() {
            return Err(CompositeError::EmptyChannel(c));
        }
        let m = median_in_place(values);
        let mut dev: Vec<f64> = values.iter().map(|v| (v - m).abs()).collect();
        let d = median_in_place(&mut dev);
        median.push(m);
        mad.push(if d < epsilon_floor { epsilon_floor } else { d });
    }
    Ok(ChannelStats { median, mad, epsilon_floor })
}

/// Median and median-absolute-deviation per channel over every valid pixel
/// of every sample. Each sample is a list of channel grids.
pub fn robust_stats(samples: &[Vec<Grid>], epsilon_floor: f64) -> Result<ChannelStats> {
    if !(epsilon_floor >= 0.0) {
        return Err(CompositeError::InvalidArgument("epsilon_floor must be >= 0".into()));
    }
    let channels = samples.first().map_or(0, Vec::len);
    if channels == 0 {
        return Err(CompositeError::InvalidArgument("no samples".into()));
    }
    let mut values = vec![Vec::new(); channels];
    for sample in samples {
        if sample.len() != channels {
            return Err(CompositeError::ChannelMismatch { expected: channels, found: sample.len() });
        }
        for (c, grid) in sample.iter().enumerate() {
            values[c].extend((0..grid.len()).filter(|&i| grid.is_valid(i)).map(|i| grid.get_f64(i)));
        }
    }
    stats_from_values(values, epsilon_floor)
}

/// Statistics pooled over all seasons of the given composites, excluding
/// fill pixels.
pub fn robust_stats_composites(composites: &[&SeasonalComposite], epsilon_floor: f64) -> Result<ChannelStats> {
    let samples: Vec<Vec<Grid>> = composites.iter().flat_map(|c| c.seasons.iter().cloned()).collect();
    robust_stats(&samples, epsilon_floor)
}

fn map_values(composite: &SeasonalComposite, stats: &ChannelStats, f: impl Fn(f64, f64, f64) -> f64) -> Result<SeasonalComposite> {
    if stats.channels() != composite.band_count() {
        return Err(CompositeError::ChannelMismatch { expected: composite.band_count(), found: stats.channels() });
    }
    let mut out = composite.clone();
    for (s, bands) in out.seasons.iter_mut().enumerate() {
        for (b, grid) in bands.iter_mut().enumerate() {
            let (med, mad) = (stats.median[b], stats.mad[b]);
            let src = composite.seasons[s][b].as_f32()?;
            let values = (0..grid.len())
                .map(|i| {
                    if composite.fill[s][i] || !grid.is_valid(i) {
                        0.0
                    } else {
                        f(src[i] as f64, med, mad) as f32
                    }
                })
                .collect();
            *grid = Grid::new(grid.width(), grid.height(), grid.transform().clone(), GridData::F32(values), grid.mask().map(<[bool]>::to_vec))?;
        }
    }
    Ok(out)
}

/// `(x - median) / mad` per channel; fill pixels are set to 0 and stay flagged.
pub fn normalize(composite: &SeasonalComposite, stats: &ChannelStats) -> Result<SeasonalComposite> {
    map_values(composite, stats, |x, med, mad| (x - med) / mad)
}

pub fn denormalize(composite: &SeasonalComposite, stats: &ChannelStats) -> Result<SeasonalComposite> {
    map_values(composite, stats, |z, med, mad| z * mad + med)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestBand {
    name: String,
    path: PathBuf,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestObservation {
    date: NaiveDate,
    bands: Vec<ManifestBand>,
    #[serde(default)]
    cloud_mask: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    modality: Modality,
    band_names: Vec<String>,
    observations: Vec<ManifestObservation>,
}

/// Loads an observation stack from a JSON manifest listing per-date NTG1
/// band grids and optional cloud-mask grids (u8, nonzero = contaminated;
/// masked-out cloud pixels count as contaminated). Relative paths resolve
/// against the manifest's directory.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<ObservationStack> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| CompositeError::Manifest(format!("{}: {e}", path.display())))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| CompositeError::Manifest(e.to_string()))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };

    let mut geometry: Option<(usize, usize, GridTransform)> = None;
    let mut observations = Vec::with_capacity(manifest.observations.len());
    for mo in &manifest.observations {
        let names: Vec<&str> = mo.bands.iter().map(|b| b.name.as_str()).collect();
        if names != manifest.band_names.iter().map(String::as_str).collect::<Vec<_>>() {
            return Err(CompositeError::Manifest(format!(
                "{}: band order {names:?} does not match band_names {:?}",
                mo.date, manifest.band_names
            )));
        }
        let bands = mo.bands.iter().map(|b| ntg1::read_grid(resolve(&b.path))).collect::<std::result::Result<Vec<_>, _>>()?;
        let first = bands.first().ok_or_else(|| CompositeError::Manifest(format!("{}: no bands", mo.date)))?;
        if geometry.is_none() {
            geometry = Some((first.width(), first.height(), first.transform().clone()));
        }
        let cloud_mask = match &mo.cloud_mask {
            Some(p) => {
                let g = ntg1::read_grid(resolve(p))?;
                first.check_aligned(&g)?;
                (0..g.len()).map(|i| !g.is_valid(i) || g.get_f64(i) != 0.0).collect()
            }
            None => vec![false; first.len()],
        };
        observations.push(Observation { date: mo.date, bands, cloud_mask });
    }
    let (w, h, t) = geometry.ok_or_else(|| CompositeError::Manifest("manifest lists no observations".into()))?;
    ObservationStack::new(manifest.modality, manifest.band_names, w, h, t, observations)
}
