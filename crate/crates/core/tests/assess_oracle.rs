mod common;

use std::fs::File;

use proptest::prelude::*;
use tcmap_core::assess::{self, AreaSource, ErrorMatrix, RegionArea};

fn table3() -> ErrorMatrix {
    ErrorMatrix::from_csv(
        File::open(common::fixture("table3_counts.csv")).unwrap(),
        File::open(common::fixture("table3_strata.csv")).unwrap(),
    )
    .unwrap()
}

fn two_class(counts: Vec<Vec<u64>>, areas: Vec<f64>, map: Vec<&str>) -> ErrorMatrix {
    let strata = (0..counts.len()).map(|h| format!("s{h}")).collect();
    ErrorMatrix::new(
        strata,
        vec!["tree_crop".into(), "non_tree_crop".into()],
        counts,
        areas,
        map.into_iter().map(String::from).collect(),
    )
    .unwrap()
}

fn arb_matrix() -> impl Strategy<Value = ErrorMatrix> {
    (1usize..5).prop_flat_map(|h| {
        (
            prop::collection::vec(prop::collection::vec(0u64..200, 2), h),
            prop::collection::vec(1.0f64..1e7, h),
            prop::collection::vec(any::<bool>(), h),
        )
            .prop_map(|(mut counts, areas, map)| {
                for row in &mut counts {
                    row[1] += 2;
                }
                let map = map.iter().map(|&t| if t { "tree_crop" } else { "non_tree_crop" }).collect();
                two_class(counts, areas, map)
            })
    })
}

#[test]
fn table3_accuracies_match_hand_formulas() {
    let m = table3();
    let acc = assess::accuracies(&m).unwrap();
    let total = 8_736_814.0 + 1_816_066_434.0 + 28_110_734.0;
    let w = [8_736_814.0 / total, 1_816_066_434.0 / total, 28_110_734.0 / total];
    let (tc, ntc, buf) = ([1277.0, 272.0], [4.0, 1728.0], [46.0, 534.0]);
    let p = |row: [f64; 2], i: usize| row[i] / (row[0] + row[1]);

    assert!((acc.user["tree_crop"] - 1277.0 / 1549.0).abs() < 1e-15);
    assert!((acc.user_weighted["tree_crop"] - acc.user["tree_crop"]).abs() < 1e-15);
    let ntc_user = (w[1] * p(ntc, 1) + w[2] * p(buf, 1)) / (w[1] + w[2]);
    assert!((acc.user_weighted["non_tree_crop"] - ntc_user).abs() < 1e-12);
    assert!((acc.user["non_tree_crop"] - (1728.0 + 534.0) / (1732.0 + 580.0)).abs() < 1e-15);

    let tc_area = w[0] * p(tc, 0) + w[1] * p(ntc, 0) + w[2] * p(buf, 0);
    let pa = acc.producer_weighted["tree_crop"].unwrap();
    assert!((pa - w[0] * p(tc, 0) / tc_area).abs() < 1e-12);
    let pa_raw = acc.producer_unweighted["tree_crop"].unwrap();
    assert!((pa_raw - 1277.0 / (1277.0 + 4.0 + 46.0)).abs() < 1e-15);
    // omissions in the huge non-tree-crop stratum dominate the weighted figure
    assert!(pa < 0.6 && pa_raw > 0.96);

    let oa = w[0] * p(tc, 0) + w[1] * p(ntc, 1) + w[2] * p(buf, 1);
    assert!((acc.overall - oa).abs() < 1e-14);
}

#[test]
fn table3_standard_error_matches_stratified_variance() {
    let m = table3();
    let areas = assess::adjusted_area(&m).unwrap();
    let a = m.total_area();
    let w = m.weights();
    let rows = [[1277.0, 272.0], [4.0, 1728.0], [46.0, 534.0]];
    let var: f64 = rows
        .iter()
        .zip(&w)
        .map(|(r, wh)| {
            let n = r[0] + r[1];
            let p = r[0] / n;
            wh * wh * p * (1.0 - p) / (n - 1.0)
        })
        .sum();
    let tc = &areas[0];
    assert_eq!(tc.class_label, "tree_crop");
    assert!((tc.se_ha / (a * var.sqrt()) - 1.0).abs() < 1e-12);
    assert!((tc.ci95_ha - 1.96 * tc.se_ha).abs() < 1e-6);
    assert_eq!(tc.mapped_area_ha, 8_736_814.0);
    assert!((areas[0].adjusted_area_ha + areas[1].adjusted_area_ha - a).abs() / a < 1e-15);
    assert!((areas[0].se_ha / areas[1].se_ha - 1.0).abs() < 1e-12);
}

#[test]
fn per_country_rows_give_a_consistent_total() {
    let regions = assess::read_regions_csv(File::open(common::fixture("table_e1_countries.csv")).unwrap()).unwrap();
    let r = assess::scaling_adjustment(&regions, assess::DEFAULT_THRESHOLD_WEIGHT).unwrap();
    let adjusted = 6_644_558.0 + 1_390_107.0 + 916_727.0 + 967_329.0;
    let initial = 4_609_541.0 + 1_557_885.0 + 834_422.0 + 871_309.0;
    assert!((r.factor - adjusted / initial).abs() < 1e-15);
    assert_eq!((r.factor * 100.0).round() / 100.0, 1.26);
    assert!((r.total_ha - (adjusted + 863_657.0 * adjusted / initial)).abs() < 1e-6);
    assert!((r.total_ha / 1e6 - 11.0).abs() < 0.02);

    // the summary rows agree to within the rounding of the published sums
    let summary = assess::read_regions_csv(File::open(common::fixture("table_e1_regions.csv")).unwrap()).unwrap();
    let s = assess::scaling_adjustment(&summary, assess::DEFAULT_THRESHOLD_WEIGHT).unwrap();
    assert!((r.factor - s.factor).abs() < 2e-3);
}

#[test]
fn low_weight_regions_are_scaled() {
    let regions = assess::read_regions_csv(File::open(common::fixture("table_e1_countries.csv")).unwrap()).unwrap();
    let r = assess::scaling_adjustment(&regions, 0.01).unwrap();
    let sources: Vec<(&str, AreaSource)> = r.regions.iter().map(|x| (x.region.as_str(), x.source)).collect();
    assert_eq!(
        sources,
        vec![
            ("BR", AreaSource::Scaled),
            ("CO", AreaSource::Direct),
            ("EC", AreaSource::Direct),
            ("CL", AreaSource::Scaled),
            ("remaining_countries", AreaSource::Scaled)
        ]
    );
    let factor = (1_390_107.0 + 916_727.0) / (1_557_885.0 + 834_422.0);
    assert!((r.factor - factor).abs() < 1e-15);
    assert!((r.regions[0].final_ha - 4_609_541.0 * factor).abs() < 1e-6);
    let total: f64 = r.regions.iter().map(|x| x.final_ha).sum();
    assert!((r.total_ha - total).abs() < 1e-6);
}

#[test]
fn scaling_without_direct_regions_fails() {
    let regions = vec![RegionArea { region: "x".into(), initial_ha: 10.0, adjusted_ha: None, tc_weight: None }];
    assert!(assess::scaling_adjustment(&regions, 0.005).is_err());
}

#[test]
fn malformed_tables_are_rejected() {
    let strata = "stratum_id,map_class,area_ha\na,tree_crop,10\nb,non_tree_crop,20\n";
    let bad_counts = [
        "stratum_id,ref_class,count\na,tree_crop,3\nz,tree_crop,1\n",
        "stratum_id,ref_class,count\na,tree_crop,3\na,tree_crop,1\n",
        "stratum_id,ref_class,count\na,tree_crop,x\n",
        "stratum_id,count\na,3\n",
    ];
    for counts in bad_counts {
        assert!(ErrorMatrix::from_csv(counts.as_bytes(), strata.as_bytes()).is_err(), "{counts}");
    }
    let ok = "stratum_id,ref_class,count\na,tree_crop,3\na,non_tree_crop,1\nb,non_tree_crop,5\nb,tree_crop,1\n";
    let m = ErrorMatrix::from_csv(ok.as_bytes(), strata.as_bytes()).unwrap();
    assert_eq!(m.stratum_total(1), 6);
    assert!(ErrorMatrix::from_csv(ok.as_bytes(), "stratum_id,map_class,area_ha\na,tree_crop,-1\nb,non_tree_crop,2\n".as_bytes()).is_err());
}

#[test]
fn classification_metrics_match_counting() {
    let mut rng = common::rng(5);
    use rand::Rng;
    let pred: Vec<bool> = (0..1000).map(|_| rng.gen_bool(0.3)).collect();
    let truth: Vec<bool> = pred.iter().map(|&p| if rng.gen_bool(0.8) { p } else { !p }).collect();
    let m = assess::classification_metrics(&pred, &truth, &true).unwrap();
    let tp = pred.iter().zip(&truth).filter(|(p, t)| **p && **t).count() as f64;
    let fp = pred.iter().zip(&truth).filter(|(p, t)| **p && !**t).count() as f64;
    let fn_ = pred.iter().zip(&truth).filter(|(p, t)| !**p && **t).count() as f64;
    assert!((m.precision - tp / (tp + fp)).abs() < 1e-15);
    assert!((m.recall - tp / (tp + fn_)).abs() < 1e-15);
    assert!((m.f1 - 2.0 * tp / (2.0 * tp + fp + fn_)).abs() < 1e-12);
    assert_eq!(m.true_positive + m.false_positive + m.false_negative + m.true_negative, 1000);
    assert!(assess::classification_metrics(&pred[..3], &truth, &true).is_err());
}

proptest! {
    #[test]
    fn overall_accuracy_matches_brute_force(m in arb_matrix()) {
        let acc = assess::accuracies(&m).unwrap();
        let w = m.weights();
        let brute: f64 = (0..m.strata().len())
            .map(|h| {
                let i = if m.map_class_of_stratum()[h] == "tree_crop" { 0 } else { 1 };
                w[h] * m.counts()[h][i] as f64 / m.stratum_total(h) as f64
            })
            .sum();
        prop_assert!((acc.overall - brute).abs() < 1e-12);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&acc.overall));
    }

    #[test]
    fn scaling_areas_scales_estimates_only(m in arb_matrix(), k in 0.01f64..100.0) {
        let scaled = m.scaled_areas(k).unwrap();
        let (a, b) = (assess::adjusted_area(&m).unwrap(), assess::adjusted_area(&scaled).unwrap());
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((y.adjusted_area_ha - k * x.adjusted_area_ha).abs() <= 1e-9 * (1.0 + y.adjusted_area_ha.abs()));
            prop_assert!((y.p_hat - x.p_hat).abs() < 1e-12);
        }
        let (ea, eb) = (assess::accuracies(&m).unwrap(), assess::accuracies(&scaled).unwrap());
        prop_assert!((ea.overall - eb.overall).abs() < 1e-12);
    }

    #[test]
    fn duplicating_a_stratum_keeps_the_estimate(m in arb_matrix(), pick in any::<prop::sample::Index>()) {
        let h = pick.index(m.strata().len());
        let mut counts = m.counts().to_vec();
        let mut areas = m.stratum_areas().to_vec();
        let mut map: Vec<&str> = m.map_class_of_stratum().iter().map(String::as_str).collect();
        areas[h] /= 2.0;
        counts.push(counts[h].clone());
        areas.push(areas[h]);
        map.push(map[h]);
        let split = two_class(counts, areas, map);
        for (x, y) in assess::adjusted_area(&m).unwrap().iter().zip(&assess::adjusted_area(&split).unwrap()) {
            prop_assert!((x.adjusted_area_ha - y.adjusted_area_ha).abs() <= 1e-9 * x.adjusted_area_ha.abs().max(1.0));
        }
    }
}
