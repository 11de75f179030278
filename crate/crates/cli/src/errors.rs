use std::fmt;

use serde::Serialize;
use tcmap_core::analytics::AnalyticsError;
use tcmap_core::assess::AssessError;
use tcmap_core::calibrate::CalibrateError;
use tcmap_core::composite::CompositeError;
use tcmap_core::model::ModelError;
use tcmap_core::ntg1::FormatError;
use tcmap_core::raster::RasterError;
use tcmap_core::sampler::SamplerError;

/// Bad config or arguments.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Debug, Serialize)]
pub struct ErrorReport {
    pub category: &'static str,
    pub message: String,
}

/// Category of the first error in the chain raised by a known layer.
pub fn category(err: &anyhow::Error) -> &'static str {
    for cause in err.chain() {
        let c = if cause.is::<UsageError>() {
            "config"
        } else if cause.is::<FormatError>() {
            "format"
        } else if cause.is::<RasterError>() {
            "raster"
        } else if cause.is::<CompositeError>() {
            "composite"
        } else if cause.is::<SamplerError>() {
            "sampler"
        } else if cause.is::<AssessError>() {
            "assess"
        } else if cause.is::<CalibrateError>() {
            "calibrate"
        } else if cause.is::<AnalyticsError>() {
            "analytics"
        } else if cause.is::<ModelError>() {
            "model"
        } else if cause.is::<std::io::Error>() {
            "io"
        } else {
            continue;
        };
        return c;
    }
    "internal"
}

/// Exit status per category: 2 for usage problems, 1 otherwise.
pub fn exit_code(category: &str) -> i32 {
    if category == "config" {
        2
    } else {
        1
    }
}
