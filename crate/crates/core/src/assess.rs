//! Design-based accuracy assessment and area estimation from a stratified
//! sample.
//!
//! Rows of an [`ErrorMatrix`] are sampling strata (each mapped to one map
//! class; a buffer stratum maps to non-tree-crop), columns are reference
//! classes. Estimators weight each stratum by its share of the mapped area:
//!
//! ```text
//! W_h   = A_h / A
//! p_ih  = n_hi / n_h
//! A_i   = A * sum_h W_h p_ih
//! SE(p_i) = sqrt( sum_h W_h^2 p_ih (1 - p_ih) / (n_h - 1) )
//! ```

use std::collections::{BTreeMap, HashMap};
use std::io;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Normal-approximation multiplier for 95% intervals.
pub const Z95: f64 = 1.96;

/// Tree-crop weight above which a region's own adjusted area is trusted.
pub const DEFAULT_THRESHOLD_WEIGHT: f64 = 0.005;

#[derive(Debug, Error)]
pub enum AssessError {
    #[error("invalid error matrix: {0}")]
    InvalidMatrix(String),
    #[error("stratum {0} has no samples")]
    EmptyStratum(String),
    #[error("stratum {stratum} has {n} samples; variance needs at least 2")]
    TooFewSamples { stratum: String, n: u64 },
    #[error("total area is zero")]
    ZeroArea,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("csv error: {0}")]
    Csv(String),
}

impl From<csv::Error> for AssessError {
    fn from(e: csv::Error) -> Self {
        AssessError::Csv(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, AssessError>;

/// `W_h = A_h / sum A`.
pub fn stratum_weights(areas: &[f64]) -> Result<Vec<f64>> {
    if areas.iter().any(|&a| !(a >= 0.0) || !a.is_finite()) {
        return Err(AssessError::InvalidArgument("stratum areas must be finite and >= 0".into()));
    }
    let total: f64 = areas.iter().sum();
    if total <= 0.0 {
        return Err(AssessError::ZeroArea);
    }
    Ok(areas.iter().map(|a| a / total).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ErrorMatrix {
    strata: Vec<String>,
    ref_classes: Vec<String>,
    /// `counts[h][i]` = samples in stratum `h` with reference class `i`.
    counts: Vec<Vec<u64>>,
    stratum_areas: Vec<f64>,
    map_class_of_stratum: Vec<String>,
}

impl ErrorMatrix {
    pub fn new(
        strata: Vec<String>,
        ref_classes: Vec<String>,
        counts: Vec<Vec<u64>>,
        stratum_areas: Vec<f64>,
        map_class_of_stratum: Vec<String>,
    ) -> Result<Self> {
        let h = strata.len();
        if h == 0 || ref_classes.is_empty() {
            return Err(AssessError::InvalidMatrix("needs at least one stratum and one reference class".into()));
        }
        if counts.len() != h || stratum_areas.len() != h || map_class_of_stratum.len() != h {
            return Err(AssessError::InvalidMatrix("row count disagrees with stratum list".into()));
        }
        if counts.iter().any(|row| row.len() != ref_classes.len()) {
            return Err(AssessError::InvalidMatrix("column count disagrees with reference classes".into()));
        }
        stratum_weights(&stratum_areas)?;
        let mut seen = std::collections::HashSet::new();
        if !strata.iter().all(|s| seen.insert(s)) {
            return Err(AssessError::InvalidMatrix("duplicate stratum id".into()));
        }
        Ok(ErrorMatrix { strata, ref_classes, counts, stratum_areas, map_class_of_stratum })
    }

    /// Counts `(stratum_id, reference_class)` labels into a matrix over the
    /// given strata `(id, map_class, area_ha)`.
    pub fn tally<'a>(
        strata: &[(String, String, f64)],
        ref_classes: Vec<String>,
        labels: impl IntoIterator<Item = (&'a str, &'a str)>,
    ) -> Result<Self> {
        let mut counts = vec![vec![0u64; ref_classes.len()]; strata.len()];
        for (stratum, class) in labels {
            let h = strata
                .iter()
                .position(|s| s.0 == stratum)
                .ok_or_else(|| AssessError::InvalidMatrix(format!("label names unknown stratum {stratum}")))?;
            let i = ref_classes
                .iter()
                .position(|c| c == class)
                .ok_or_else(|| AssessError::InvalidMatrix(format!("label names unknown reference class {class}")))?;
            counts[h][i] += 1;
        }
        ErrorMatrix::new(
            strata.iter().map(|s| s.0.clone()).collect(),
            ref_classes,
            counts,
            strata.iter().map(|s| s.2).collect(),
            strata.iter().map(|s| s.1.clone()).collect(),
        )
    }

    pub fn strata(&self) -> &[String] {
        &self.strata
    }

    pub fn ref_classes(&self) -> &[String] {
        &self.ref_classes
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn stratum_areas(&self) -> &[f64] {
        &self.stratum_areas
    }

    pub fn map_class_of_stratum(&self) -> &[String] {
        &self.map_class_of_stratum
    }

    pub fn total_area(&self) -> f64 {
        self.stratum_areas.iter().sum()
    }

    pub fn weights(&self) -> Vec<f64> {
        stratum_weights(&self.stratum_areas).expect("validated at construction")
    }

    pub fn stratum_total(&self, h: usize) -> u64 {
        self.counts[h].iter().sum()
    }

    fn ref_index(&self, class: &str) -> Option<usize> {
        self.ref_classes.iter().position(|c| c == class)
    }

    /// Map classes in order of first appearance.
    pub fn map_classes(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for c in &self.map_class_of_stratum {
            if !out.contains(c) {
                out.push(c.clone());
            }
        }
        out
    }

    fn check_nonempty(&self) -> Result<()> {
        for (h, s) in self.strata.iter().enumerate() {
            if self.stratum_total(h) == 0 {
                return Err(AssessError::EmptyStratum(s.clone()));
            }
        }
        Ok(())
    }

    /// `p_ih = n_hi / n_h`.
    pub fn proportions(&self) -> Result<Vec<Vec<f64>>> {
        self.check_nonempty()?;
        Ok(self
            .counts
            .iter()
            .map(|row| {
                let n: u64 = row.iter().sum();
                row.iter().map(|&c| c as f64 / n as f64).collect()
            })
            .collect())
    }

    /// Same matrix with every area multiplied by `k`.
    pub fn scaled_areas(&self, k: f64) -> Result<ErrorMatrix> {
        ErrorMatrix::new(
            self.strata.clone(),
            self.ref_classes.clone(),
            self.counts.clone(),
            self.stratum_areas.iter().map(|a| a * k).collect(),
            self.map_class_of_stratum.clone(),
        )
    }

    /// Loads the CSV pair `stratum_id,ref_class,count` and
    /// `stratum_id,map_class,area_ha`. Strata keep the order of the strata
    /// file, reference classes their order of first appearance; missing
    /// cells are zero.
    pub fn from_csv<R1: io::Read, R2: io::Read>(counts: R1, strata: R2) -> Result<ErrorMatrix> {
        let mut ids = Vec::new();
        let mut areas = Vec::new();
        let mut map_classes = Vec::new();
        let mut rs = csv::Reader::from_reader(strata);
        expect_header(&mut rs, &["stratum_id", "map_class", "area_ha"])?;
        for rec in rs.records() {
            let rec = rec?;
            ids.push(rec[0].to_string());
            map_classes.push(rec[1].to_string());
            areas.push(parse_number(&rec[2], "area_ha")?);
        }
        let index: HashMap<&str, usize> = ids.iter().enumerate().map(|(k, s)| (s.as_str(), k)).collect();
        if index.len() != ids.len() {
            return Err(AssessError::InvalidMatrix("duplicate stratum id in strata file".into()));
        }

        let mut ref_classes: Vec<String> = Vec::new();
        let mut cells: BTreeMap<(usize, usize), u64> = BTreeMap::new();
        let mut rc = csv::Reader::from_reader(counts);
        expect_header(&mut rc, &["stratum_id", "ref_class", "count"])?;
        for rec in rc.records() {
            let rec = rec?;
            let h = *index
                .get(&rec[0])
                .ok_or_else(|| AssessError::InvalidMatrix(format!("counts name unknown stratum {}", &rec[0])))?;
            let i = match ref_classes.iter().position(|c| c == &rec[1]) {
                Some(i) => i,
                None => {
                    ref_classes.push(rec[1].to_string());
                    ref_classes.len() - 1
                }
            };
            let n: u64 = rec[2].trim().parse().map_err(|_| AssessError::Csv(format!("invalid count {:?}", &rec[2])))?;
            if cells.insert((h, i), n).is_some() {
                return Err(AssessError::InvalidMatrix(format!("duplicate cell ({}, {})", &rec[0], &rec[1])));
            }
        }
        let mut counts = vec![vec![0u64; ref_classes.len()]; ids.len()];
        for ((h, i), n) in cells {
            counts[h][i] = n;
        }
        ErrorMatrix::new(ids, ref_classes, counts, areas, map_classes)
    }
}

fn expect_header<R: io::Read>(r: &mut csv::Reader<R>, expected: &[&str]) -> Result<()> {
    let got: Vec<String> = r.headers()?.iter().map(|s| s.trim().to_string()).collect();
    if got != expected {
        return Err(AssessError::Csv(format!("expected header {expected:?}, got {got:?}")));
    }
    Ok(())
}

fn parse_number(s: &str, what: &str) -> Result<f64> {
    s.trim().replace('_', "").parse().map_err(|_| AssessError::Csv(format!("invalid {what} {s:?}")))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Accuracies {
    /// Correct / total over strata mapped as the class (sample counts).
    pub user: BTreeMap<String, f64>,
    /// Area-weighted user's accuracy over strata mapped as the class.
    pub user_weighted: BTreeMap<String, f64>,
    /// Area-adjusted producer's accuracy; `None` when the class has zero
    /// estimated area.
    pub producer_weighted: BTreeMap<String, Option<f64>>,
    /// Producer's accuracy from raw sample counts (ignores stratum weights).
    pub producer_unweighted: BTreeMap<String, Option<f64>>,
    pub overall: f64,
}

pub fn accuracies(m: &ErrorMatrix) -> Result<Accuracies> {
    let p = m.proportions()?;
    let w = m.weights();
    let agree_col: Vec<Option<usize>> = m.map_class_of_stratum.iter().map(|c| m.ref_index(c)).collect();

    let mut user = BTreeMap::new();
    let mut user_weighted = BTreeMap::new();
    for class in m.map_classes() {
        let rows: Vec<usize> = (0..m.strata.len()).filter(|&h| m.map_class_of_stratum[h] == class).collect();
        let col = m.ref_index(&class);
        let correct: u64 = rows.iter().map(|&h| col.map_or(0, |i| m.counts[h][i])).sum();
        let total: u64 = rows.iter().map(|&h| m.stratum_total(h)).sum();
        user.insert(class.clone(), correct as f64 / total as f64);
        let wsum: f64 = rows.iter().map(|&h| w[h]).sum();
        let wcorrect: f64 = rows.iter().map(|&h| col.map_or(0.0, |i| w[h] * p[h][i])).sum();
        user_weighted.insert(class, wcorrect / wsum);
    }

    let mut producer_weighted = BTreeMap::new();
    let mut producer_unweighted = BTreeMap::new();
    for (i, class) in m.ref_classes.iter().enumerate() {
        let mapped_here = |h: usize| agree_col[h] == Some(i);
        let num: f64 = (0..m.strata.len()).filter(|&h| mapped_here(h)).map(|h| w[h] * p[h][i]).sum();
        let den: f64 = (0..m.strata.len()).map(|h| w[h] * p[h][i]).sum();
        producer_weighted.insert(class.clone(), (den > 0.0).then(|| num / den));
        let num: u64 = (0..m.strata.len()).filter(|&h| mapped_here(h)).map(|h| m.counts[h][i]).sum();
        let den: u64 = (0..m.strata.len()).map(|h| m.counts[h][i]).sum();
        producer_unweighted.insert(class.clone(), (den > 0).then(|| num as f64 / den as f64));
    }

    let overall = (0..m.strata.len()).map(|h| agree_col[h].map_or(0.0, |i| w[h] * p[h][i])).sum();
    Ok(Accuracies { user, user_weighted, producer_weighted, producer_unweighted, overall })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AreaEstimate {
    pub class_label: String,
    /// Sum of stratum areas mapped as this class.
    pub mapped_area_ha: f64,
    pub adjusted_area_ha: f64,
    pub se_ha: f64,
    pub ci95_ha: f64,
    pub p_hat: f64,
    pub se_p: f64,
}

/// Stratified estimator of each reference class's area and its standard error.
pub fn adjusted_area(m: &ErrorMatrix) -> Result<Vec<AreaEstimate>> {
    for (h, s) in m.strata.iter().enumerate() {
        let n = m.stratum_total(h);
        if n <= 1 {
            return Err(AssessError::TooFewSamples { stratum: s.clone(), n });
        }
    }
    let p = m.proportions()?;
    let w = m.weights();
    let a = m.total_area();
    Ok(m.ref_classes
        .iter()
        .enumerate()
        .map(|(i, class)| {
            let p_hat: f64 = (0..m.strata.len()).map(|h| w[h] * p[h][i]).sum();
            let var: f64 = (0..m.strata.len())
                .map(|h| w[h] * w[h] * p[h][i] * (1.0 - p[h][i]) / (m.stratum_total(h) - 1) as f64)
                .sum();
            let se_p = var.sqrt();
            let mapped_area_ha =
                (0..m.strata.len()).filter(|&h| &m.map_class_of_stratum[h] == class).map(|h| m.stratum_areas[h]).sum();
            AreaEstimate {
                class_label: class.clone(),
                mapped_area_ha,
                adjusted_area_ha: a * p_hat,
                se_ha: a * se_p,
                ci95_ha: Z95 * a * se_p,
                p_hat,
                se_p,
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StratumAudit {
    pub stratum_id: String,
    pub map_class: String,
    pub area_ha: f64,
    pub weight: f64,
    pub n: u64,
    pub p_hat: BTreeMap<String, f64>,
}

/// Every intermediate quantity of an assessment, for audit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssessmentReport {
    pub total_area_ha: f64,
    pub strata: Vec<StratumAudit>,
    pub accuracies: Accuracies,
    pub areas: Vec<AreaEstimate>,
}

pub fn assessment_report(m: &ErrorMatrix) -> Result<AssessmentReport> {
    let p = m.proportions()?;
    let w = m.weights();
    let strata = (0..m.strata.len())
        .map(|h| StratumAudit {
            stratum_id: m.strata[h].clone(),
            map_class: m.map_class_of_stratum[h].clone(),
            area_ha: m.stratum_areas[h],
            weight: w[h],
            n: m.stratum_total(h),
            p_hat: m.ref_classes.iter().cloned().zip(p[h].iter().copied()).collect(),
        })
        .collect();
    Ok(AssessmentReport { total_area_ha: m.total_area(), strata, accuracies: accuracies(m)?, areas: adjusted_area(m)? })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionArea {
    pub region: String,
    pub initial_ha: f64,
    pub adjusted_ha: Option<f64>,
    /// Tree-crop stratum weight (fraction of region area), when known.
    pub tc_weight: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AreaSource {
    Direct,
    Scaled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaledRegion {
    pub region: String,
    pub initial_ha: f64,
    pub final_ha: f64,
    pub source: AreaSource,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingResult {
    pub factor: f64,
    pub threshold_weight: f64,
    pub direct_initial_ha: f64,
    pub direct_adjusted_ha: f64,
    pub scaled_initial_ha: f64,
    pub scaled_final_ha: f64,
    pub total_initial_ha: f64,
    pub total_ha: f64,
    pub regions: Vec<ScaledRegion>,
}

/// Ratio of adjusted to initial area over regions with trustworthy direct
/// estimates, applied to every other region.
///
/// A region counts as direct when it has an adjusted area and its tree-crop
/// weight (if given) exceeds `threshold_weight`.
pub fn scaling_adjustment(regions: &[RegionArea], threshold_weight: f64) -> Result<ScalingResult> {
    let direct = |r: &RegionArea| r.adjusted_ha.is_some() && r.tc_weight.map_or(true, |w| w > threshold_weight);
    let direct_initial_ha: f64 = regions.iter().filter(|r| direct(r)).map(|r| r.initial_ha).sum();
    let direct_adjusted_ha: f64 = regions.iter().filter(|r| direct(r)).filter_map(|r| r.adjusted_ha).sum();
    if !regions.iter().any(direct) {
        return Err(AssessError::InvalidArgument("no region has a usable adjusted area".into()));
    }
    if direct_initial_ha <= 0.0 {
        return Err(AssessError::ZeroArea);
    }
    let factor = direct_adjusted_ha / direct_initial_ha;
    let out: Vec<ScaledRegion> = regions
        .iter()
        .map(|r| {
            if direct(r) {
                ScaledRegion { region: r.region.clone(), initial_ha: r.initial_ha, final_ha: r.adjusted_ha.unwrap(), source: AreaSource::Direct }
            } else {
                ScaledRegion { region: r.region.clone(), initial_ha: r.initial_ha, final_ha: r.initial_ha * factor, source: AreaSource::Scaled }
            }
        })
        .collect();
    let scaled_initial_ha = out.iter().filter(|r| r.source == AreaSource::Scaled).map(|r| r.initial_ha).sum();
    let scaled_final_ha = out.iter().filter(|r| r.source == AreaSource::Scaled).map(|r| r.final_ha).sum();
    Ok(ScalingResult {
        factor,
        threshold_weight,
        direct_initial_ha,
        direct_adjusted_ha,
        scaled_initial_ha,
        scaled_final_ha,
        total_initial_ha: regions.iter().map(|r| r.initial_ha).sum(),
        total_ha: direct_adjusted_ha + scaled_final_ha,
        regions: out,
    })
}

/// Reads `region,initial_ha,adjusted_ha,tc_weight`; empty cells are absent values.
pub fn read_regions_csv<R: io::Read>(input: R) -> Result<Vec<RegionArea>> {
    let mut r = csv::Reader::from_reader(input);
    expect_header(&mut r, &["region", "initial_ha", "adjusted_ha", "tc_weight"])?;
    let optional = |s: &str, what: &str| -> Result<Option<f64>> {
        if s.trim().is_empty() {
            Ok(None)
        } else {
            parse_number(s, what).map(Some)
        }
    };
    r.records()
        .map(|rec| {
            let rec = rec?;
            Ok(RegionArea {
                region: rec[0].to_string(),
                initial_ha: parse_number(&rec[1], "initial_ha")?,
                adjusted_ha: optional(&rec[2], "adjusted_ha")?,
                tc_weight: optional(&rec[3], "tc_weight")?,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub true_positive: u64,
    pub false_positive: u64,
    pub false_negative: u64,
    pub true_negative: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Set when a denominator was zero and the affected metric defaulted to 0.
    pub undefined: bool,
}

pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

pub fn classification_metrics<T: PartialEq>(pred: &[T], reference: &[T], positive: &T) -> Result<ClassificationMetrics> {
    if pred.len() != reference.len() {
        return Err(AssessError::InvalidArgument(format!("{} predictions vs {} references", pred.len(), reference.len())));
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0u64, 0u64, 0u64, 0u64);
    for (p, r) in pred.iter().zip(reference) {
        match (p == positive, r == positive) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    let ratio = |a: u64, b: u64| if b == 0 { None } else { Some(a as f64 / b as f64) };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let undefined = precision.is_none() || recall.is_none();
    let (precision, recall) = (precision.unwrap_or(0.0), recall.unwrap_or(0.0));
    Ok(ClassificationMetrics {
        true_positive: tp,
        false_positive: fp,
        false_negative: fn_,
        true_negative: tn,
        precision,
        recall,
        f1: f1_score(precision, recall),
        undefined,
    })
}
