use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context as _, Result};
use clap::Args;
use serde::Serialize;
use tcmap_core::analytics::{self, LossYearGrid};
use tcmap_core::assess::{self, ErrorMatrix};
use tcmap_core::calibrate;
use tcmap_core::composite::{self, ObservationStack, SeasonalComposite};
use tcmap_core::labels::{self, LAND_COVER_CLASSES, NON_TREE_CROP, TREE_CROP};
use tcmap_core::model::{self, InputStack, ModelConfig, ParamSet};
use tcmap_core::raster::{Grid, RegionMask};
use tcmap_core::sampler::{self, Allocation, SampleDesign, StratumSpec};

use crate::config::PipelineConfig;
use crate::errors::UsageError;
use crate::output::{Artifacts, GridFormat, Inputs};

pub struct Context {
    pub config: PipelineConfig,
    pub format: GridFormat,
}

impl Context {
    fn artifacts(&self) -> Artifacts {
        Artifacts::new(self.format)
    }
}

type Outcome = Result<(Artifacts, Inputs)>;

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Reads a binary map (u8, 0 or 1) as a region mask.
fn read_mask(inputs: &mut Inputs, path: &Path, id: &str) -> Result<RegionMask> {
    let grid = inputs.grid(path)?;
    RegionMask::new(grid, id).with_context(|| format!("{} is not a binary map", path.display()))
}

fn read_region(inputs: &mut Inputs, path: Option<&Path>, like: &Grid) -> Result<RegionMask> {
    match path {
        Some(p) => read_mask(inputs, p, "region"),
        None => Ok(RegionMask::full_like(like, "region")?),
    }
}

#[derive(Debug, Args)]
pub struct CompositeArgs {
    /// Observation manifest (optical, or the ascending radar pass).
    #[arg(long)]
    manifest: PathBuf,
    /// Descending radar manifest; requires `--incidence`.
    #[arg(long, requires = "incidence")]
    descending: Option<PathBuf>,
    /// Incidence-angle grid for radar stacking.
    #[arg(long)]
    incidence: Option<PathBuf>,
}

#[derive(Serialize)]
struct CompositeSummary<'a> {
    modality: composite::Modality,
    observations_in: usize,
    observations_kept: usize,
    band_names: &'a [String],
    fill_pixels: Vec<usize>,
    stats: composite::ChannelStats,
}

pub fn composite(ctx: &Context, args: CompositeArgs) -> Outcome {
    let c = &ctx.config.composite;
    let mut inputs = Inputs::default();
    inputs.record(&args.manifest)?;
    let first = composite::load_manifest(&args.manifest)?;
    let (stack, reducer, observations_in): (ObservationStack, _, usize) = match first.modality() {
        composite::Modality::Optical => {
            if args.descending.is_some() {
                return Err(usage("--descending applies to radar manifests only"));
            }
            let n = first.len();
            (composite::cloud_filter(&first, c.max_cloud_fraction)?, c.optical_reducer, n)
        }
        composite::Modality::Radar => {
            let (Some(desc), Some(inc)) = (&args.descending, &args.incidence) else {
                return Err(usage("radar compositing needs --descending and --incidence"));
            };
            inputs.record(desc)?;
            let desc = composite::load_manifest(desc)?;
            let incidence = inputs.grid(inc)?;
            let n = first.len() + desc.len();
            (composite::stack_radar_channels(&first, &desc, &incidence)?, c.radar_reducer, n)
        }
    };
    let seasonal: SeasonalComposite = composite::seasonal_composite(&stack, reducer, &c.windows)?;
    let stats = composite::robust_stats_composites(&[&seasonal], c.mad_floor)?;
    let mut out = ctx.artifacts();
    for (s, bands) in seasonal.seasons.iter().enumerate() {
        for (b, grid) in bands.iter().enumerate() {
            out.grid(&format!("season{s}_{}", seasonal.band_names[b]), grid)?;
        }
    }
    out.json(
        "composite.json",
        &CompositeSummary {
            modality: stack.modality(),
            observations_in,
            observations_kept: stack.len(),
            band_names: &seasonal.band_names,
            fill_pixels: seasonal.fill.iter().map(|f| f.iter().filter(|&&x| x).count()).collect(),
            stats,
        },
    )?;
    Ok((out, inputs))
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    /// Binary tree-crop map (u8, 1 = tree crop); masked pixels are outside
    /// the mapped domain.
    #[arg(long)]
    map: PathBuf,
}

pub fn sample(ctx: &Context, args: SampleArgs) -> Outcome {
    let cfg = &ctx.config.sample;
    let mut inputs = Inputs::default();
    let tc = read_mask(&mut inputs, &args.map, TREE_CROP)?;
    let buffer = sampler::buffer_stratum(&tc, cfg.buffer_radius_m)?;
    let rest: Vec<bool> = (0..tc.len()).map(|i| tc.is_valid(i) && !tc.contains(i) && !buffer.contains(i)).collect();
    let rest = RegionMask::from_bools(tc.width(), tc.height(), tc.transform().clone(), &rest, NON_TREE_CROP)?;
    let wanted = [("tree_crop", TREE_CROP, tc, cfg.tree_crop), ("non_tree_crop", NON_TREE_CROP, rest, cfg.non_tree_crop), ("buffer", NON_TREE_CROP, buffer, cfg.buffer)];
    let wanted: Vec<_> = wanted.into_iter().filter(|w| w.2.count() > 0).collect();
    if wanted.is_empty() {
        bail!(usage("map has no valid pixels"));
    }
    let allocation = Allocation(wanted.iter().map(|w| (w.0.to_string(), w.3)).collect());
    let strata = StratumSpec::from_masks(wanted.into_iter().map(|w| (w.0.to_string(), w.1.to_string(), w.2)).collect())?;
    let mut strata_csv = String::from("stratum_id,map_class,area_ha\n");
    for s in &strata {
        writeln!(strata_csv, "{},{},{}", s.stratum_id, s.map_class, s.area_ha)?;
    }
    let design = SampleDesign::new(strata, allocation, ctx.config.seed)?;
    let points = sampler::stratified_sample(&design)?;
    let mut out = ctx.artifacts();
    out.text("samples.csv", |w| sampler::write_samples_csv(&points, w).map_err(std::io::Error::other))?;
    out.bytes("strata.csv", strata_csv.into_bytes());
    Ok((out, inputs))
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    /// Sample list as written by `sample`.
    #[arg(long)]
    samples: PathBuf,
}

pub fn split(ctx: &Context, args: SplitArgs) -> Outcome {
    let cfg = &ctx.config.split;
    let mut inputs = Inputs::default();
    let points = sampler::read_samples_csv(inputs.read(&args.samples)?.as_slice())?;
    let [a, b, c] = cfg.ratios;
    let points = sampler::geo_split(&points, cfg.cell_km, (a, b, c), ctx.config.seed)?;
    let mut counts = BTreeMap::new();
    for p in &points {
        *counts.entry(format!("{:?}", p.split).to_lowercase()).or_insert(0u64) += 1;
    }
    let mut out = ctx.artifacts();
    out.text("samples.csv", |w| sampler::write_samples_csv(&points, w).map_err(std::io::Error::other))?;
    out.json("split.json", &counts)?;
    Ok((out, inputs))
}

#[derive(Debug, Args)]
pub struct AssessArgs {
    /// Stratum table: `stratum_id,map_class,area_ha`.
    #[arg(long)]
    strata: PathBuf,
    /// Count table: `stratum_id,ref_class,count`.
    #[arg(long, conflicts_with = "samples", required_unless_present = "samples")]
    counts: Option<PathBuf>,
    /// Labelled sample list, tallied into counts.
    #[arg(long)]
    samples: Option<PathBuf>,
}

/// Builds the error matrix from counts or from labelled samples.
fn error_matrix(inputs: &mut Inputs, strata: &Path, counts: Option<&Path>, samples: Option<&Path>) -> Result<ErrorMatrix> {
    let strata_bytes = inputs.read(strata)?;
    let counts_bytes = match (counts, samples) {
        (Some(c), _) => inputs.read(c)?,
        (None, Some(s)) => {
            let points = sampler::read_samples_csv(inputs.read(s)?.as_slice())?;
            let mut tally: BTreeMap<(String, String), u64> = BTreeMap::new();
            for p in &points {
                let Some(r) = &p.ref_class else {
                    bail!(usage(format!("sample {} has no reference label", p.id)));
                };
                *tally.entry((p.stratum_id.clone(), labels::to_binary(r).to_string())).or_default() += 1;
            }
            let mut csv = String::from("stratum_id,ref_class,count\n");
            for ((h, r), n) in tally {
                writeln!(csv, "{h},{r},{n}")?;
            }
            csv.into_bytes()
        }
        (None, None) => bail!(usage("assessment needs --counts or --samples")),
    };
    Ok(ErrorMatrix::from_csv(counts_bytes.as_slice(), strata_bytes.as_slice())?)
}

pub fn assess(ctx: &Context, args: AssessArgs) -> Outcome {
    let mut inputs = Inputs::default();
    let m = error_matrix(&mut inputs, &args.strata, args.counts.as_deref(), args.samples.as_deref())?;
    let mut out = ctx.artifacts();
    out.json("assessment.json", &assess::assessment_report(&m)?)?;
    Ok((out, inputs))
}

#[derive(Debug, Args)]
pub struct AreaArgs {
    /// Stratum table, as for `assess`.
    #[arg(long, requires = "counts")]
    strata: Option<PathBuf>,
    /// Count table, as for `assess`.
    #[arg(long, requires = "strata")]
    counts: Option<PathBuf>,
    /// Regional table `region,initial_ha,adjusted_ha,tc_weight`; regions
    /// without a usable adjusted area are scaled.
    #[arg(long, required_unless_present = "counts")]
    scale: Option<PathBuf>,
}

pub fn area(ctx: &Context, args: AreaArgs) -> Outcome {
    let mut inputs = Inputs::default();
    let mut out = ctx.artifacts();
    if let (Some(strata), Some(counts)) = (&args.strata, &args.counts) {
        let m = error_matrix(&mut inputs, strata, Some(counts), None)?;
        out.json("areas.json", &assess::adjusted_area(&m)?)?;
    }
    if let Some(path) = &args.scale {
        let regions = assess::read_regions_csv(inputs.read(path)?.as_slice())?;
        out.json("scaling.json", &assess::scaling_adjustment(&regions, ctx.config.area.threshold_weight)?)?;
    }
    Ok((out, inputs))
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    /// One ensemble member: comma-separated logit grids in class order.
    /// Repeat for each member.
    #[arg(long = "member", required = true, value_delimiter = ',', num_args = 1.., action = clap::ArgAction::Append)]
    members: Vec<PathBuf>,
    /// Class labels in grid order; the land-cover classes by default.
    #[arg(long, value_delimiter = ',')]
    labels: Option<Vec<String>>,
    /// Reference class-index grid (u8); enables the reliability table.
    #[arg(long)]
    reference: Option<PathBuf>,
}

#[derive(Serialize)]
struct CalibrationReport {
    members: usize,
    pixels: usize,
    mean_entropy: f64,
    ece: Option<f64>,
}

pub fn calibrate(ctx: &Context, args: CalibrateArgs) -> Outcome {
    let cfg = &ctx.config.calibrate;
    let labels: Vec<String> = args.labels.unwrap_or_else(|| LAND_COVER_CLASSES.iter().map(|s| s.to_string()).collect());
    let k = labels.len();
    if k < 2 || args.members.len() % k != 0 {
        bail!(usage(format!("{} logit grids do not split into members of {k} classes", args.members.len())));
    }
    let mut inputs = Inputs::default();
    let grids = args.members.iter().map(|p| inputs.grid(p)).collect::<Result<Vec<_>>>()?;
    let members: Vec<Vec<Grid>> = grids.chunks(k).map(<[Grid]>::to_vec).collect();
    let field = calibrate::ensemble_fuse(&members, &labels)?;
    let entropy = calibrate::entropy_map(&field)?;
    let map = calibrate::threshold_mask(&field, &cfg.class, cfg.threshold)?;

    let mut out = ctx.artifacts();
    for (label, grid) in labels.iter().zip(field.to_grids()?) {
        out.grid(&format!("probability_{label}"), &grid)?;
    }
    out.grid("entropy", &entropy)?;
    out.grid(&format!("{}_map", cfg.class), map.grid())?;

    let ev = entropy.as_f32()?;
    let valid: Vec<usize> = (0..field.len()).filter(|&i| field.valid[i]).collect();
    let mean_entropy = valid.iter().map(|&i| ev[i] as f64).sum::<f64>() / valid.len().max(1) as f64;
    let mut ece = None;
    if let Some(path) = &args.reference {
        let reference = inputs.grid(path)?;
        field.to_grids()?[0].check_aligned(&reference)?;
        let mut confidence = Vec::new();
        let mut correct = Vec::new();
        for &i in &valid {
            if reference.is_valid(i) {
                confidence.push((1.0 - ev[i] as f64).clamp(0.0, 1.0));
                correct.push(field.argmax(i) == Some(reference.get_f64(i) as usize));
            }
        }
        let table = calibrate::ece(&confidence, &correct, cfg.bins)?;
        out.text("reliability.csv", |w| calibrate::write_reliability_csv(&table, w))?;
        ece = Some(table.ece);
    }
    out.json("calibration.json", &CalibrationReport { members: members.len(), pixels: valid.len(), mean_entropy, ece })?;
    Ok((out, inputs))
}

#[derive(Debug, Args)]
pub struct LossOverlapArgs {
    /// Binary tree-crop map.
    #[arg(long)]
    map: PathBuf,
    /// Loss-year grid (u8, 0 = no loss, 1..=20 = 2001..=2020).
    #[arg(long)]
    loss: PathBuf,
    /// Binary region restricting the analysis.
    #[arg(long)]
    region: Option<PathBuf>,
}

pub fn loss_overlap(ctx: &Context, args: LossOverlapArgs) -> Outcome {
    let mut inputs = Inputs::default();
    let tc = read_mask(&mut inputs, &args.map, TREE_CROP)?;
    let loss = LossYearGrid::new(inputs.grid(&args.loss)?)?;
    let region = read_region(&mut inputs, args.region.as_deref(), tc.grid())?;
    let overlap = analytics::loss_overlap(&tc, &loss, &region)?;
    let mut out = ctx.artifacts();
    out.text("loss_overlap.csv", |w| analytics::write_loss_csv(&overlap, w))?;
    out.json("loss_overlap.json", &overlap)?;
    Ok((out, inputs))
}

#[derive(Debug, Args)]
pub struct PaProfileArgs {
    /// Binary tree-crop map.
    #[arg(long)]
    map: PathBuf,
    /// Binary protected-area map.
    #[arg(long)]
    pa: PathBuf,
    /// Binary region restricting the analysis.
    #[arg(long)]
    region: Option<PathBuf>,
}

pub fn pa_profile(ctx: &Context, args: PaProfileArgs) -> Outcome {
    let cfg = &ctx.config.analytics;
    let mut inputs = Inputs::default();
    let tc = read_mask(&mut inputs, &args.map, TREE_CROP)?;
    let pa = read_mask(&mut inputs, &args.pa, "pa")?;
    let region = args.region.as_deref().map(|p| read_mask(&mut inputs, p, "region")).transpose()?;
    let profile = analytics::pa_buffer_profile(&tc, &pa, cfg.band_width_m, cfg.max_dist_m, region.as_ref())?;
    let mut out = ctx.artifacts();
    out.text("pa_profile.csv", |w| analytics::write_profile_csv(&profile, w))?;
    out.json("pa_profile.json", &profile)?;
    Ok((out, inputs))
}

#[derive(Debug, Args)]
pub struct HexArgs {
    /// Binary tree-crop map.
    #[arg(long)]
    map: PathBuf,
    /// Binary region restricting the analysis.
    #[arg(long)]
    region: Option<PathBuf>,
}

pub fn hex(ctx: &Context, args: HexArgs) -> Outcome {
    let mut inputs = Inputs::default();
    let tc = read_mask(&mut inputs, &args.map, TREE_CROP)?;
    let region = args.region.as_deref().map(|p| read_mask(&mut inputs, p, "region")).transpose()?;
    let cells = analytics::hex_aggregate(&tc, ctx.config.analytics.hex_side_m, region.as_ref())?;
    let mut out = ctx.artifacts();
    out.text("hex.csv", |w| analytics::write_hex_csv(&cells, w))?;
    Ok((out, inputs))
}

#[derive(Debug, Args)]
pub struct AgreeArgs {
    /// First binary map.
    #[arg(long)]
    a: PathBuf,
    /// Second binary map, on the same grid.
    #[arg(long)]
    b: PathBuf,
    /// Binary region restricting the comparison; the whole grid by default.
    #[arg(long)]
    region: Option<PathBuf>,
}

pub fn agree(ctx: &Context, args: AgreeArgs) -> Outcome {
    let mut inputs = Inputs::default();
    let a = read_mask(&mut inputs, &args.a, "a")?;
    let b = read_mask(&mut inputs, &args.b, "b")?;
    let region = read_region(&mut inputs, args.region.as_deref(), a.grid())?;
    let mut out = ctx.artifacts();
    out.json("agreement.json", &analytics::map_agreement(&a, &b, &region)?)?;
    Ok((out, inputs))
}

#[derive(Debug, Args)]
pub struct ModelForwardArgs {
    /// Radar grids, season-major (every channel of season 0, then season 1, ...).
    #[arg(long, required = true, value_delimiter = ',')]
    s1: Vec<PathBuf>,
    /// Optical grids, season-major.
    #[arg(long, required = true, value_delimiter = ',')]
    s2: Vec<PathBuf>,
}

fn model_config(inputs: &mut Inputs, path: Option<&Path>) -> Result<ModelConfig> {
    match path {
        Some(p) => {
            let text = String::from_utf8(inputs.read(p)?).context("model config is not UTF-8")?;
            ModelConfig::from_json(&text).map_err(|e| usage(format!("model config {}: {e}", p.display())))
        }
        None => Ok(ModelConfig::default()),
    }
}

/// Stacks season-major grids into a `T x H x W x C` input.
fn input_stack(inputs: &mut Inputs, paths: &[PathBuf], seasons: usize, channels: usize) -> Result<(InputStack, Grid)> {
    if paths.len() != seasons * channels {
        bail!(usage(format!("expected {seasons} seasons x {channels} channels = {} grids, got {}", seasons * channels, paths.len())));
    }
    let grids = paths.iter().map(|p| inputs.grid(p)).collect::<Result<Vec<_>>>()?;
    let (h, w) = (grids[0].height(), grids[0].width());
    let mut data = vec![0.0f32; seasons * h * w * channels];
    for (j, g) in grids.iter().enumerate() {
        grids[0].check_aligned(g)?;
        let (t, c) = (j / channels, j % channels);
        for i in 0..h * w {
            let v = g.get_f64(i) as f32;
            data[(t * h * w + i) * channels + c] = if g.is_valid(i) && v.is_finite() { v } else { 0.0 };
        }
    }
    Ok((InputStack::new(seasons, h, w, channels, data)?, grids[0].clone()))
}

pub fn model_forward(ctx: &Context, args: ModelForwardArgs) -> Outcome {
    let mut inputs = Inputs::default();
    let params = match &ctx.config.model.params {
        Some(dir) => {
            let manifest = inputs.read(&dir.join("manifest.json"))?;
            let payload = inputs.read(&dir.join("params.bin"))?;
            ParamSet::from_bytes(&manifest, &payload)?
        }
        None => ParamSet::init(&model_config(&mut inputs, ctx.config.model.config.as_deref())?, ctx.config.seed)?,
    };
    let cfg = &params.config;
    let (s1, like) = input_stack(&mut inputs, &args.s1, cfg.seasons, cfg.s1_channels)?;
    let (s2, like2) = input_stack(&mut inputs, &args.s2, cfg.seasons, cfg.s2_channels)?;
    like.check_aligned(&like2)?;
    let logits = model::forward_tiled(&s1, &s2, &params)?;
    let mut out = ctx.artifacts();
    for (k, grid) in logits.to_grids(like.transform())?.iter().enumerate() {
        let name = if cfg.num_classes == LAND_COVER_CLASSES.len() { LAND_COVER_CLASSES[k].to_string() } else { format!("class{k}") };
        out.grid(&format!("logits_{name}"), grid)?;
    }
    Ok((out, inputs))
}

#[derive(Serialize)]
struct ParamReport {
    parameters: usize,
    config: ModelConfig,
}

pub fn param_count(ctx: &Context) -> Outcome {
    let mut inputs = Inputs::default();
    let config = model_config(&mut inputs, ctx.config.model.config.as_deref())?;
    let parameters = model::param_count(&config)?;
    let mut out = ctx.artifacts();
    out.json("param_count.json", &ParamReport { parameters, config })?;
    Ok((out, inputs))
}
