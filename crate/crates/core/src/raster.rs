//! Georeferenced, north-up raster grids with validity masks.
//!
//! A [`Grid`] is the unit every other module consumes. Values are stored in
//! one of four pixel types, row-major, with an optional per-pixel validity
//! mask. Masked pixels are skipped by every operation; nothing is imputed.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("invalid transform: {0}")]
    InvalidTransform(String),
    #[error("value buffer holds {actual} pixels, expected {expected}")]
    SizeMismatch { expected: usize, actual: usize },
    #[error("grids are not co-registered: {0}")]
    TransformMismatch(String),
    #[error("expected dtype {expected}, found {found}")]
    DtypeMismatch { expected: DType, found: DType },
    #[error("region mask value {value} at pixel {index} is not 0 or 1")]
    NonBinaryMask { index: usize, value: u8 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, RasterError>;

/// Pixel types supported by the grid container and the NTG1 format.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    U8,
    U16,
    I32,
    F32,
}

impl DType {
    pub const ALL: [DType; 4] = [DType::U8, DType::U16, DType::I32, DType::F32];

    pub fn size_bytes(self) -> usize {
        match self {
            DType::U8 => 1,
            DType::U16 => 2,
            DType::I32 | DType::F32 => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::U8 => "u8",
            DType::U16 => "u16",
            DType::I32 => "i32",
            DType::F32 => "f32",
        }
    }
}

impl std::fmt::Display for DType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// North-up, square-pixel mapping between pixel indices and projected
/// coordinates. The origin is the outer top-left corner of pixel (0, 0).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridTransform {
    pub origin_x: f64,
    pub origin_y: f64,
    pub pixel_size: f64,
    pub crs_label: String,
}

impl GridTransform {
    pub fn new(origin_x: f64, origin_y: f64, pixel_size: f64, crs_label: impl Into<String>) -> Result<Self> {
        let t = GridTransform { origin_x, origin_y, pixel_size, crs_label: crs_label.into() };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.pixel_size.is_finite() && self.pixel_size > 0.0) {
            return Err(RasterError::InvalidTransform(format!(
                "pixel_size must be positive and finite, got {}",
                self.pixel_size
            )));
        }
        if !self.origin_x.is_finite() || !self.origin_y.is_finite() {
            return Err(RasterError::InvalidTransform("origin must be finite".into()));
        }
        Ok(())
    }

    /// Projected coordinates of the center of pixel (row, col).
    pub fn pixel_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.origin_x + (col as f64 + 0.5) * self.pixel_size,
            self.origin_y - (row as f64 + 0.5) * self.pixel_size,
        )
    }

    /// Fractional pixel coordinates (row, col) of a world point; pixel
    /// centers map to `k + 0.5`.
    pub fn world_to_pixel_f(&self, x: f64, y: f64) -> (f64, f64) {
        ((self.origin_y - y) / self.pixel_size, (x - self.origin_x) / self.pixel_size)
    }

    /// Pixel containing a world point, or `None` when it falls outside a
    /// `width` x `height` extent.
    pub fn world_to_pixel(&self, x: f64, y: f64, width: usize, height: usize) -> Option<(usize, usize)> {
        let (rf, cf) = self.world_to_pixel_f(x, y);
        let (r, c) = (rf.floor(), cf.floor());
        if r < 0.0 || c < 0.0 || r >= height as f64 || c >= width as f64 {
            return None;
        }
        Some((r as usize, c as usize))
    }

    /// Area of one pixel in hectares.
    pub fn pixel_area_ha(&self) -> f64 {
        self.pixel_size * self.pixel_size / 10_000.0
    }

    /// Transform of the same extent at `factor` times finer resolution.
    pub fn refined(&self, factor: usize) -> GridTransform {
        GridTransform { pixel_size: self.pixel_size / factor as f64, ..self.clone() }
    }
}

/// Typed pixel buffer.
#[derive(Clone, Debug, PartialEq)]
pub enum GridData {
    U8(Vec<u8>),
    U16(Vec<u16>),
    I32(Vec<i32>),
    F32(Vec<f32>),
}

impl GridData {
    pub fn dtype(&self) -> DType {
        match self {
            GridData::U8(_) => DType::U8,
            GridData::U16(_) => DType::U16,
            GridData::I32(_) => DType::I32,
            GridData::F32(_) => DType::F32,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            GridData::U8(v) => v.len(),
            GridData::U16(v) => v.len(),
            GridData::I32(v) => v.len(),
            GridData::F32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn zeros(dtype: DType, len: usize) -> GridData {
        match dtype {
            DType::U8 => GridData::U8(vec![0; len]),
            DType::U16 => GridData::U16(vec![0; len]),
            DType::I32 => GridData::I32(vec![0; len]),
            DType::F32 => GridData::F32(vec![0.0; len]),
        }
    }

    #[inline]
    pub fn get_f64(&self, idx: usize) -> f64 {
        match self {
            GridData::U8(v) => v[idx] as f64,
            GridData::U16(v) => v[idx] as f64,
            GridData::I32(v) => v[idx] as f64,
            GridData::F32(v) => v[idx] as f64,
        }
    }

    fn gather(&self, indices: impl Iterator<Item = usize>) -> GridData {
        match self {
            GridData::U8(v) => GridData::U8(indices.map(|i| v[i]).collect()),
            GridData::U16(v) => GridData::U16(indices.map(|i| v[i]).collect()),
            GridData::I32(v) => GridData::I32(indices.map(|i| v[i]).collect()),
            GridData::F32(v) => GridData::F32(indices.map(|i| v[i]).collect()),
        }
    }
}

/// A georeferenced raster. `mask == None` means every pixel is valid.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    width: usize,
    height: usize,
    transform: GridTransform,
    data: GridData,
    mask: Option<Vec<bool>>,
}

impl Grid {
    pub fn new(width: usize, height: usize, transform: GridTransform, data: GridData, mask: Option<Vec<bool>>) -> Result<Self> {
        transform.validate()?;
        let expected = width.checked_mul(height).ok_or_else(|| RasterError::InvalidArgument("grid dimensions overflow".into()))?;
        if data.len() != expected {
            return Err(RasterError::SizeMismatch { expected, actual: data.len() });
        }
        if let Some(m) = &mask {
            if m.len() != expected {
                return Err(RasterError::SizeMismatch { expected, actual: m.len() });
            }
        }
        Ok(Grid { width, height, transform, data, mask })
    }

    pub fn from_u8(width: usize, height: usize, transform: GridTransform, values: Vec<u8>) -> Result<Self> {
        Grid::new(width, height, transform, GridData::U8(values), None)
    }

    pub fn from_f32(width: usize, height: usize, transform: GridTransform, values: Vec<f32>) -> Result<Self> {
        Grid::new(width, height, transform, GridData::F32(values), None)
    }

    pub fn zeros(width: usize, height: usize, transform: GridTransform, dtype: DType) -> Result<Self> {
        Grid::new(width, height, transform, GridData::zeros(dtype, width * height), None)
    }

    pub fn with_mask(mut self, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != self.len() {
            return Err(RasterError::SizeMismatch { expected: self.len(), actual: mask.len() });
        }
        self.mask = Some(mask);
        Ok(self)
    }

    pub fn without_mask(mut self) -> Self {
        self.mask = None;
        self
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn transform(&self) -> &GridTransform {
        &self.transform
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn data(&self) -> &GridData {
        &self.data
    }

    pub fn into_data(self) -> GridData {
        self.data
    }

    pub fn mask(&self) -> Option<&[bool]> {
        self.mask.as_deref()
    }

    #[inline]
    pub fn is_valid(&self, idx: usize) -> bool {
        self.mask.as_ref().map_or(true, |m| m[idx])
    }

    /// Materialized validity mask.
    pub fn valid_mask(&self) -> Vec<bool> {
        self.mask.clone().unwrap_or_else(|| vec![true; self.len()])
    }

    pub fn valid_count(&self) -> usize {
        self.mask.as_ref().map_or(self.len(), |m| m.iter().filter(|&&v| v).count())
    }

    #[inline]
    pub fn get_f64(&self, idx: usize) -> f64 {
        self.data.get_f64(idx)
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.width + col
    }

    pub fn as_u8(&self) -> Result<&[u8]> {
        match &self.data {
            GridData::U8(v) => Ok(v),
            other => Err(RasterError::DtypeMismatch { expected: DType::U8, found: other.dtype() }),
        }
    }

    pub fn as_f32(&self) -> Result<&[f32]> {
        match &self.data {
            GridData::F32(v) => Ok(v),
            other => Err(RasterError::DtypeMismatch { expected: DType::F32, found: other.dtype() }),
        }
    }

    /// Same dimensions and identical transform (CRS label included).
    pub fn is_aligned_with(&self, other: &Grid) -> bool {
        self.width == other.width && self.height == other.height && self.transform == other.transform
    }

    pub fn check_aligned(&self, other: &Grid) -> Result<()> {
        if self.is_aligned_with(other) {
            Ok(())
        } else {
            Err(RasterError::TransformMismatch(format!(
                "{}x{} @ {:?} vs {}x{} @ {:?}",
                self.width, self.height, self.transform, other.width, other.height, other.transform
            )))
        }
    }

    /// Copy of a rectangular window; the transform is shifted accordingly.
    pub fn window(&self, w: &Window) -> Result<Grid> {
        if w.row + w.height > self.height || w.col + w.width > self.width {
            return Err(RasterError::InvalidArgument(format!("window {w:?} exceeds {}x{}", self.width, self.height)));
        }
        let idx = || (w.row..w.row + w.height).flat_map(move |r| (w.col..w.col + w.width).map(move |c| r * self.width + c));
        let data = self.data.gather(idx());
        let mask = self.mask.as_ref().map(|m| idx().map(|i| m[i]).collect());
        let (x0, y0) = (
            self.transform.origin_x + w.col as f64 * self.transform.pixel_size,
            self.transform.origin_y - w.row as f64 * self.transform.pixel_size,
        );
        let transform = GridTransform { origin_x: x0, origin_y: y0, ..self.transform.clone() };
        Grid::new(w.width, w.height, transform, data, mask)
    }
}

/// Nearest-neighbour upsampling by an integer factor: every source pixel
/// becomes a `factor` x `factor` block of identical values.
pub fn resample_nearest(grid: &Grid, factor: usize) -> Result<Grid> {
    if factor == 0 {
        return Err(RasterError::InvalidArgument("resample factor must be >= 1".into()));
    }
    let (w, h) = (grid.width * factor, grid.height * factor);
    let src_w = grid.width;
    let source = || (0..h).flat_map(move |r| (0..w).map(move |c| (r / factor) * src_w + c / factor));
    let data = grid.data.gather(source());
    let mask = grid.mask.as_ref().map(|m| source().map(|i| m[i]).collect());
    Grid::new(w, h, grid.transform.refined(factor), data, mask)
}

/// Rectangular pixel window.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Window {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
}

impl Window {
    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }
}

/// Row-major tiling of a `width` x `height` extent. Edge tiles are clipped.
#[derive(Clone, Debug)]
pub struct Tiles {
    width: usize,
    height: usize,
    tile: usize,
    next_row: usize,
    next_col: usize,
}

impl Iterator for Tiles {
    type Item = Window;

    fn next(&mut self) -> Option<Window> {
        if self.next_row >= self.height || self.width == 0 {
            return None;
        }
        let w = Window {
            row: self.next_row,
            col: self.next_col,
            height: self.tile.min(self.height - self.next_row),
            width: self.tile.min(self.width - self.next_col),
        };
        self.next_col += self.tile;
        if self.next_col >= self.width {
            self.next_col = 0;
            self.next_row += self.tile;
        }
        Some(w)
    }
}

pub fn tiles(grid: &Grid, tile_size: usize) -> Result<Tiles> {
    tiles_for(grid.width, grid.height, tile_size)
}

pub fn tiles_for(width: usize, height: usize, tile_size: usize) -> Result<Tiles> {
    if tile_size == 0 {
        return Err(RasterError::InvalidArgument("tile size must be >= 1".into()));
    }
    Ok(Tiles { width, height, tile: tile_size, next_row: 0, next_col: 0 })
}

/// Binary membership raster for one region (country, stratum, PA, map class).
#[derive(Clone, Debug, PartialEq)]
pub struct RegionMask {
    grid: Grid,
    region_id: String,
}

impl RegionMask {
    /// Wraps a u8 grid whose values are all 0 or 1.
    pub fn new(grid: Grid, region_id: impl Into<String>) -> Result<Self> {
        let values = grid.as_u8()?;
        if let Some((index, &value)) = values.iter().enumerate().find(|(_, &v)| v > 1) {
            return Err(RasterError::NonBinaryMask { index, value });
        }
        Ok(RegionMask { grid, region_id: region_id.into() })
    }

    pub fn from_bools(width: usize, height: usize, transform: GridTransform, members: &[bool], region_id: impl Into<String>) -> Result<Self> {
        let values = members.iter().map(|&b| b as u8).collect();
        RegionMask::new(Grid::from_u8(width, height, transform, values)?, region_id)
    }

    /// Every valid pixel of `like` is a member; validity is copied.
    pub fn full_like(like: &Grid, region_id: impl Into<String>) -> Result<Self> {
        let mut g = Grid::from_u8(like.width, like.height, like.transform.clone(), vec![1; like.len()])?;
        if let Some(m) = like.mask() {
            g = g.with_mask(m.to_vec())?;
        }
        RegionMask::new(g, region_id)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn into_grid(self) -> Grid {
        self.grid
    }

    pub fn region_id(&self) -> &str {
        &self.region_id
    }

    pub fn width(&self) -> usize {
        self.grid.width
    }

    pub fn height(&self) -> usize {
        self.grid.height
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    pub fn transform(&self) -> &GridTransform {
        &self.grid.transform
    }

    #[inline]
    pub fn is_valid(&self, idx: usize) -> bool {
        self.grid.is_valid(idx)
    }

    /// Valid and flagged 1.
    #[inline]
    pub fn contains(&self, idx: usize) -> bool {
        self.grid.is_valid(idx) && matches!(&self.grid.data, GridData::U8(v) if v[idx] == 1)
    }

    pub fn members(&self) -> Vec<bool> {
        (0..self.len()).map(|i| self.contains(i)).collect()
    }

    pub fn count(&self) -> usize {
        (0..self.len()).filter(|&i| self.contains(i)).count()
    }

    pub fn area_ha(&self) -> f64 {
        self.count() as f64 * self.transform().pixel_area_ha()
    }

    pub fn check_aligned(&self, other: &Grid) -> Result<()> {
        self.grid.check_aligned(other)
    }
}

/// Sum using a fixed pairwise split so the result depends only on the input
/// order, never on how work was scheduled.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const LEAF: usize = 32;
    if values.len() <= LEAF {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}
