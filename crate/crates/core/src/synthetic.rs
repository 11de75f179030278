//! Seeded synthetic scene and the full processing chain run on it:
//! compositing, model inference, ensemble fusion, thresholding, stratified
//! sampling, assessment, calibration and landscape analytics.
//!
//! Every artifact is returned as bytes keyed by file name, so runs can be
//! compared byte for byte.

use std::collections::BTreeMap;

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analytics::{self, AnalyticsError, LossYearGrid};
use crate::assess::{self, AssessError, ErrorMatrix};
use crate::calibrate::{self, CalibrateError, ThresholdMode};
use crate::composite::{self, CompositeError, Modality, Observation, ObservationStack, Reducer, SeasonWindows, SeasonalComposite};
use crate::labels::{self, LAND_COVER_CLASSES, NON_TREE_CROP, TREE_CROP, TREE_CROP_INDEX};
use crate::model::{self, InputStack, ModelConfig, ModelError, ParamSet};
use crate::ntg1;
use crate::raster::{Grid, GridTransform, RasterError, RegionMask};
use crate::sampler::{self, Allocation, SampleDesign, SamplerError, StratumSpec};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Composite(#[from] CompositeError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Calibrate(#[from] CalibrateError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Assess(#[from] AssessError),
    #[error(transparent)]
    Analytics(#[from] AnalyticsError),
    #[error("invalid synthetic config: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub pixel_size_m: f64,
    pub observations_per_year: usize,
    pub max_cloud_fraction: f64,
    pub ensemble_members: usize,
    /// Quantile of the fused tree-crop probability used as the map threshold.
    pub map_quantile: f64,
    pub samples_tree_crop: u64,
    pub samples_non_tree_crop: u64,
    pub samples_buffer: u64,
    pub buffer_radius_m: f64,
    pub split_cell_km: f64,
    pub ece_bins: usize,
    pub band_width_m: f64,
    pub max_dist_m: f64,
    pub hex_side_m: f64,
    pub model: ModelConfig,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            seed: 42,
            pixel_size_m: 10.0,
            observations_per_year: 24,
            max_cloud_fraction: composite::DEFAULT_MAX_CLOUD_FRACTION,
            ensemble_members: 2,
            map_quantile: 0.7,
            samples_tree_crop: 60,
            samples_non_tree_crop: 60,
            samples_buffer: 30,
            buffer_radius_m: 30.0,
            split_cell_km: 0.2,
            ece_bins: calibrate::DEFAULT_ECE_BINS,
            band_width_m: 50.0,
            max_dist_m: 300.0,
            hex_side_m: 150.0,
            model: ModelConfig::default(),
        }
    }
}

/// Ground truth of a synthetic scene.
#[derive(Clone, Debug)]
pub struct Scene {
    pub transform: GridTransform,
    pub size: usize,
    /// Land-cover class index per pixel.
    pub classes: Vec<u8>,
    pub optical: ObservationStack,
    pub radar_asc: ObservationStack,
    pub radar_desc: ObservationStack,
    pub incidence: Grid,
    pub loss_year: LossYearGrid,
    pub protected_area: RegionMask,
}

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

fn discs(rng: &mut ChaCha8Rng, size: usize, count: usize, r_lo: f64, r_hi: f64) -> Vec<(f64, f64, f64)> {
    (0..count)
        .map(|_| (rng.gen_range(0.0..size as f64), rng.gen_range(0.0..size as f64), rng.gen_range(r_lo..r_hi)))
        .collect()
}

fn in_disc(d: &(f64, f64, f64), r: usize, c: usize) -> bool {
    let (dy, dx) = (r as f64 + 0.5 - d.0, c as f64 + 0.5 - d.1);
    dy * dy + dx * dx <= d.2 * d.2
}

/// Builds the scene: tree-crop discs over a blocky background of the other
/// classes, per-class spectral and backscatter signatures with seasonal
/// modulation and noise, rectangular clouds, loss-year patches and one
/// protected area.
pub fn generate_scene(config: &SyntheticConfig) -> Result<Scene> {
    let size = config.model.image_size;
    let n = size * size;
    let transform = GridTransform::new(500_000.0, 9_000_000.0, config.pixel_size_m, "synthetic")?;
    let mut r = rng(config.seed, 0);

    let block = 16usize.min(size);
    let blocks_per_side = size.div_ceil(block);
    let background: Vec<u8> = (0..blocks_per_side * blocks_per_side).map(|_| r.gen_range(1..LAND_COVER_CLASSES.len() as u8)).collect();
    let crops = discs(&mut r, size, 10, 3.0, 12.0);
    let classes: Vec<u8> = (0..n)
        .map(|i| {
            let (row, col) = (i / size, i % size);
            if crops.iter().any(|d| in_disc(d, row, col)) {
                TREE_CROP_INDEX as u8
            } else {
                background[(row / block) * blocks_per_side + col / block]
            }
        })
        .collect();

    let k = LAND_COVER_CLASSES.len();
    let optical_sig: Vec<Vec<f64>> = (0..k).map(|_| (0..10).map(|_| r.gen_range(0.02..0.5)).collect()).collect();
    let radar_sig: Vec<Vec<f64>> = (0..k).map(|_| (0..2).map(|_| r.gen_range(-22.0..-5.0)).collect()).collect();

    let start = NaiveDate::from_ymd_opt(2021, 1, 1).expect("valid date");
    let step = 365 / config.observations_per_year.max(1) as i64;
    let dates: Vec<NaiveDate> = (0..config.observations_per_year).map(|j| start + chrono::Duration::days(j as i64 * step + 3)).collect();

    let mut obs_rng = rng(config.seed, 1);
    let grid = |values: Vec<f32>| Grid::from_f32(size, size, transform.clone(), values);
    let mut optical = Vec::with_capacity(dates.len());
    for (j, &date) in dates.iter().enumerate() {
        let phase = (j as f64 / dates.len() as f64 * std::f64::consts::TAU).sin();
        let bands = (0..10)
            .map(|b| {
                grid((0..n)
                    .map(|i| (optical_sig[classes[i] as usize][b] * (1.0 + 0.2 * phase) + obs_rng.gen_range(-0.02..0.02)) as f32)
                    .collect())
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let (h, w) = (obs_rng.gen_range(0..size), obs_rng.gen_range(0..size));
        let (y0, x0) = (obs_rng.gen_range(0..size), obs_rng.gen_range(0..size));
        let cloud_mask = (0..n).map(|i| (i / size).wrapping_sub(y0) < h && (i % size).wrapping_sub(x0) < w).collect();
        optical.push(Observation { date, bands, cloud_mask });
    }
    let optical = ObservationStack::new(Modality::Optical, (1..=10).map(|b| format!("B{b}")).collect(), size, size, transform.clone(), optical)?;

    let mut pass = |offset: i64, gain: f64| -> Result<ObservationStack> {
        let mut obs = Vec::with_capacity(dates.len());
        for &date in &dates {
            let bands = (0..2)
                .map(|b| grid((0..n).map(|i| (radar_sig[classes[i] as usize][b] + gain + obs_rng.gen_range(-1.0..1.0)) as f32).collect()))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            obs.push(Observation { date: date + chrono::Duration::days(offset), bands, cloud_mask: vec![false; n] });
        }
        Ok(ObservationStack::new(Modality::Radar, vec!["VV".into(), "VH".into()], size, size, transform.clone(), obs)?)
    };
    let radar_asc = pass(0, 0.0)?;
    let radar_desc = pass(2, -0.5)?;
    let incidence = grid((0..n).map(|i| 30.0 + 15.0 * (i % size) as f32 / size as f32).collect())?;

    let mut lr = rng(config.seed, 2);
    let patches: Vec<((f64, f64, f64), u8)> = discs(&mut lr, size, 12, 4.0, 14.0).into_iter().map(|d| (d, lr.gen_range(1..=20u8))).collect();
    let loss: Vec<u8> = (0..n)
        .map(|i| patches.iter().find(|(d, _)| in_disc(d, i / size, i % size)).map_or(0, |p| p.1))
        .collect();
    let loss_year = LossYearGrid::new(Grid::from_u8(size, size, transform.clone(), loss)?)?;
    let pa = (size as f64 / 2.0, size as f64 / 2.0, size as f64 / 5.0);
    let pa_members: Vec<bool> = (0..n).map(|i| in_disc(&pa, i / size, i % size)).collect();
    let protected_area = RegionMask::from_bools(size, size, transform.clone(), &pa_members, "pa")?;

    Ok(Scene { transform, size, classes, optical, radar_asc, radar_desc, incidence, loss_year, protected_area })
}

fn model_input(c: &SeasonalComposite) -> InputStack {
    InputStack::from_composite(c)
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> Vec<u8> {
    let mut out = Vec::new();
    f(&mut out).expect("writing to memory cannot fail");
    out
}

fn json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut v = serde_json::to_vec_pretty(value).expect("report serializes");
    v.push(b'\n');
    v
}

/// Lower `q` quantile (nearest rank) of the values.
fn quantile(mut values: Vec<f32>, q: f64) -> f32 {
    values.sort_by(f32::total_cmp);
    let idx = ((values.len() as f64 * q).floor() as usize).min(values.len() - 1);
    values[idx]
}

#[derive(Debug, Serialize)]
struct CalibrationSummary {
    pixels: usize,
    ece: f64,
    mean_entropy: f64,
}

/// Runs the chain and returns the artifacts keyed by file name.
pub fn run(config: &SyntheticConfig) -> Result<BTreeMap<String, Vec<u8>>> {
    if config.ensemble_members == 0 {
        return Err(PipelineError::InvalidConfig("ensemble_members must be >= 1".into()));
    }
    if config.model.num_classes != LAND_COVER_CLASSES.len() {
        return Err(PipelineError::InvalidConfig(format!("model must predict {} classes", LAND_COVER_CLASSES.len())));
    }
    if !(0.0..1.0).contains(&config.map_quantile) {
        return Err(PipelineError::InvalidConfig("map_quantile must lie in [0, 1)".into()));
    }
    config.model.validate()?;
    let scene = generate_scene(config)?;
    let mut out = BTreeMap::new();
    let (size, tf) = (scene.size, &scene.transform);
    let n = size * size;

    // composites
    let windows = SeasonWindows::quarters();
    let optical = composite::cloud_filter(&scene.optical, config.max_cloud_fraction)?;
    let s2 = composite::seasonal_composite(&optical, Reducer::Median, &windows)?;
    let radar = composite::stack_radar_channels(&scene.radar_asc, &scene.radar_desc, &scene.incidence)?;
    let s1 = composite::seasonal_composite(&radar, Reducer::Median, &windows)?;
    let s2n = composite::normalize(&s2, &composite::robust_stats_composites(&[&s2], composite::DEFAULT_MAD_FLOOR)?)?;
    let s1n = composite::normalize(&s1, &composite::robust_stats_composites(&[&s1], composite::DEFAULT_MAD_FLOOR)?)?;
    for (s, bands) in s2.seasons.iter().enumerate() {
        out.insert(format!("composite_s2_season{s}_b1.ntg1"), ntg1::encode(&bands[0]));
    }
    for (s, bands) in s1.seasons.iter().enumerate() {
        out.insert(format!("composite_s1_season{s}_vv_asc.ntg1"), ntg1::encode(&bands[0]));
    }

    // model ensemble
    let (in1, in2) = (model_input(&s1n), model_input(&s2n));
    let mut members = Vec::with_capacity(config.ensemble_members);
    for m in 0..config.ensemble_members {
        let params = ParamSet::init(&config.model, config.seed.wrapping_add(1000 + m as u64))?;
        let logits = model::forward(&in1, &in2, &params)?;
        let grids = logits.to_grids(tf)?;
        out.insert(format!("logits_member{m}_tree_crop.ntg1"), ntg1::encode(&grids[TREE_CROP_INDEX]));
        members.push(grids);
    }
    let class_labels: Vec<String> = LAND_COVER_CLASSES.iter().map(|s| s.to_string()).collect();
    let field = calibrate::ensemble_fuse(&members, &class_labels)?;
    let prob_grids = field.to_grids()?;
    out.insert("probability_tree_crop.ntg1".into(), ntg1::encode(&prob_grids[TREE_CROP_INDEX]));
    let entropy = calibrate::entropy_map(&field)?;
    out.insert("entropy.ntg1".into(), ntg1::encode(&entropy));

    // threshold
    let tc_probs: Vec<f32> = (0..n).filter(|&i| field.valid[i]).map(|i| field.planes[TREE_CROP_INDEX][i]).collect();
    if tc_probs.is_empty() {
        return Err(PipelineError::InvalidConfig("no valid pixels after fusion".into()));
    }
    let threshold = quantile(tc_probs, config.map_quantile);
    let tc_map = calibrate::threshold_mask(&field, TREE_CROP, ThresholdMode::AtLeast(threshold as f64))?;
    out.insert("tree_crop_map.ntg1".into(), ntg1::encode(tc_map.grid()));

    // calibration: confidence is one minus normalized entropy, correctness is
    // agreement of the binary map with the binary truth
    let ev = entropy.as_f32()?;
    let mut confidence = Vec::with_capacity(n);
    let mut correct = Vec::with_capacity(n);
    for i in 0..n {
        if field.valid[i] {
            confidence.push((1.0 - ev[i] as f64).clamp(0.0, 1.0));
            correct.push(tc_map.contains(i) == (scene.classes[i] as usize == TREE_CROP_INDEX));
        }
    }
    let table = calibrate::ece(&confidence, &correct, config.ece_bins)?;
    out.insert("reliability.csv".into(), csv_bytes(|w| calibrate::write_reliability_csv(&table, w)));
    let mean_entropy = (0..n).filter(|&i| entropy.is_valid(i)).map(|i| ev[i] as f64).sum::<f64>() / confidence.len().max(1) as f64;
    out.insert("calibration.json".into(), json_bytes(&CalibrationSummary { pixels: confidence.len(), ece: table.ece, mean_entropy }));

    // sampling
    let buffer = sampler::buffer_stratum(&tc_map, config.buffer_radius_m)?;
    let rest: Vec<bool> = (0..n).map(|i| tc_map.is_valid(i) && !tc_map.contains(i) && !buffer.contains(i)).collect();
    let rest = RegionMask::from_bools(size, size, tf.clone(), &rest, NON_TREE_CROP)?;
    let masks = vec![
        ("tree_crop".to_string(), TREE_CROP.to_string(), tc_map.clone()),
        ("buffer".to_string(), NON_TREE_CROP.to_string(), buffer),
        ("non_tree_crop".to_string(), NON_TREE_CROP.to_string(), rest),
    ];
    // strata without pixels take no part in the design
    let masks = masks.into_iter().filter(|m| m.2.count() > 0).collect();
    let strata = StratumSpec::from_masks(masks)?;
    let wanted = |id: &str| match id {
        "tree_crop" => config.samples_tree_crop,
        "buffer" => config.samples_buffer,
        _ => config.samples_non_tree_crop,
    };
    let allocation = Allocation(strata.iter().map(|s| (s.stratum_id.clone(), wanted(&s.stratum_id).min(s.mask.count() as u64))).collect());
    let strata_rows: Vec<(String, String, f64)> = strata.iter().map(|s| (s.stratum_id.clone(), s.map_class.clone(), s.area_ha)).collect();
    let design = SampleDesign::new(strata, allocation, config.seed)?;
    let mut points = sampler::stratified_sample(&design)?;
    for p in &mut points {
        let (r, c) = tf.world_to_pixel(p.x, p.y, size, size).expect("samples fall inside the scene");
        p.ref_class = Some(labels::to_binary(LAND_COVER_CLASSES[scene.classes[r * size + c] as usize]).to_string());
    }
    let points = sampler::geo_split(&points, config.split_cell_km, sampler::DEFAULT_SPLIT_RATIOS, config.seed)?;
    let mut samples_csv = Vec::new();
    sampler::write_samples_csv(&points, &mut samples_csv)?;
    out.insert("samples.csv".into(), samples_csv);

    // assessment
    let matrix = ErrorMatrix::tally(
        &strata_rows,
        vec![TREE_CROP.to_string(), NON_TREE_CROP.to_string()],
        points.iter().map(|p| (p.stratum_id.as_str(), p.ref_class.as_deref().unwrap_or(labels::UNKNOWN))),
    )?;
    out.insert("assessment.json".into(), json_bytes(&assess::assessment_report(&matrix)?));

    // analytics
    let region = RegionMask::full_like(tc_map.grid(), "scene")?;
    let overlap = analytics::loss_overlap(&tc_map, &scene.loss_year, &region)?;
    out.insert("loss_overlap.csv".into(), csv_bytes(|w| analytics::write_loss_csv(&overlap, w)));
    let profile = analytics::pa_buffer_profile(&tc_map, &scene.protected_area, config.band_width_m, config.max_dist_m, None)?;
    out.insert("pa_profile.csv".into(), csv_bytes(|w| analytics::write_profile_csv(&profile, w)));
    let hexes = analytics::hex_aggregate(&tc_map, config.hex_side_m, None)?;
    out.insert("hex.csv".into(), csv_bytes(|w| analytics::write_hex_csv(&hexes, w)));
    let truth: Vec<bool> = scene.classes.iter().map(|&c| c as usize == TREE_CROP_INDEX).collect();
    let truth = RegionMask::from_bools(size, size, tf.clone(), &truth, "truth")?;
    out.insert("agreement.json".into(), json_bytes(&analytics::map_agreement(&tc_map, &truth, &region)?));
    Ok(out)
}
