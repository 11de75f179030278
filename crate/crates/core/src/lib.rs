//! Tree-crop mapping toolkit: raster plumbing, seasonal compositing,
//! probability sampling designs, design-based accuracy and area estimation,
//! uncertainty calibration, landscape analytics and a forward pass of a
//! multi-modal temporal-spatial vision transformer.

pub mod analytics;
pub mod assess;
pub mod calibrate;
pub mod composite;
pub mod edt;
pub mod labels;
pub mod model;
pub mod ntg1;
pub mod raster;
pub mod sampler;
pub mod synthetic;
