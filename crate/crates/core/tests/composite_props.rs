mod common;

use chrono::NaiveDate;
use rand::Rng;
use tcmap_core::composite::{self, Modality, MonthRange, Observation, ObservationStack, Reducer, SeasonWindows};
use tcmap_core::ntg1;
use tcmap_core::raster::Grid;

fn date(y: i32, m: u32, d: u32) -> NaiveDate {
    NaiveDate::from_ymd_opt(y, m, d).unwrap()
}

fn constant(w: usize, h: usize, v: f32) -> Grid {
    Grid::from_f32(w, h, common::transform(10.0), vec![v; w * h]).unwrap()
}

fn stack(modality: Modality, bands: &[&str], obs: Vec<Observation>) -> ObservationStack {
    let g = &obs[0].bands[0];
    let (w, h, t) = (g.width(), g.height(), g.transform().clone());
    ObservationStack::new(modality, bands.iter().map(|s| s.to_string()).collect(), w, h, t, obs).unwrap()
}

fn random_composite(seed: u64) -> composite::SeasonalComposite {
    let mut rng = common::rng(seed);
    let obs = (1..=12)
        .map(|m| Observation {
            date: date(2021, m, 10),
            bands: (0..3).map(|b| Grid::from_f32(6, 5, common::transform(10.0), (0..30).map(|_| rng.gen_range(-5.0..5.0) * (b + 1) as f32).collect()).unwrap()).collect(),
            cloud_mask: (0..30).map(|_| rng.gen_bool(0.3)).collect(),
        })
        .collect();
    let s = stack(Modality::Optical, &["B1", "B2", "B3"], obs);
    composite::seasonal_composite(&s, Reducer::Median, &SeasonWindows::quarters()).unwrap()
}

#[test]
fn normalization_round_trips() {
    let c = random_composite(1);
    let stats = composite::robust_stats_composites(&[&c], composite::DEFAULT_MAD_FLOOR).unwrap();
    let z = composite::normalize(&c, &stats).unwrap();
    let back = composite::denormalize(&z, &stats).unwrap();
    for s in 0..4 {
        for b in 0..3 {
            let (orig, rt) = (c.seasons[s][b].as_f32().unwrap(), back.seasons[s][b].as_f32().unwrap());
            for i in 0..30 {
                if !c.fill[s][i] {
                    assert!((orig[i] - rt[i]).abs() < 1e-4 * (1.0 + orig[i].abs()));
                }
            }
        }
    }
    assert_eq!(back.fill, c.fill);
}

#[test]
fn normalized_channels_have_zero_median_and_unit_mad() {
    let c = random_composite(2);
    let stats = composite::robust_stats_composites(&[&c], composite::DEFAULT_MAD_FLOOR).unwrap();
    let z = composite::normalize(&c, &stats).unwrap();
    for b in 0..3 {
        let values: Vec<f64> = (0..4)
            .flat_map(|s| {
                let g = &z.seasons[s][b];
                (0..g.len()).filter(|&i| g.is_valid(i)).map(|i| g.get_f64(i)).collect::<Vec<_>>()
            })
            .collect();
        let med = common::median(values.clone());
        let mad = common::median(values.iter().map(|v| (v - med).abs()).collect());
        assert!(med.abs() < 1e-5, "{med}");
        assert!((mad - 1.0).abs() < 1e-5, "{mad}");
    }
}

#[test]
fn constant_channel_uses_the_mad_floor() {
    let obs = vec![Observation { date: date(2021, 1, 5), bands: vec![constant(3, 3, 7.0)], cloud_mask: vec![false; 9] }];
    let s = stack(Modality::Optical, &["B1"], obs);
    let stats = composite::robust_stats(&[s.observations()[0].bands.clone()], 0.5).unwrap();
    assert_eq!(stats.median, vec![7.0]);
    assert_eq!(stats.mad, vec![0.5]);
}

#[test]
fn wrapping_windows_assign_december_to_the_first_season() {
    let windows = SeasonWindows::new([
        MonthRange { first: 12, last: 2 },
        MonthRange { first: 3, last: 5 },
        MonthRange { first: 6, last: 8 },
        MonthRange { first: 9, last: 11 },
    ])
    .unwrap();
    assert_eq!(windows.season_of(date(2021, 12, 31)), 0);
    assert_eq!(windows.season_of(date(2021, 1, 1)), 0);
    assert_eq!(windows.season_of(date(2021, 3, 1)), 1);
    let obs = vec![
        Observation { date: date(2021, 1, 10), bands: vec![constant(2, 2, 1.0)], cloud_mask: vec![false; 4] },
        Observation { date: date(2021, 12, 10), bands: vec![constant(2, 2, 3.0)], cloud_mask: vec![false; 4] },
    ];
    let c = composite::seasonal_composite(&stack(Modality::Optical, &["B1"], obs), Reducer::Mean, &windows).unwrap();
    assert_eq!(c.seasons[0][0].get_f64(0), 2.0);
    assert!(c.fill[1].iter().all(|&f| f));
    let overlapping = [MonthRange { first: 1, last: 4 }, MonthRange { first: 4, last: 6 }, MonthRange { first: 7, last: 9 }, MonthRange { first: 10, last: 12 }];
    assert!(SeasonWindows::new(overlapping).is_err());
}

#[test]
fn radar_passes_merge_by_date() {
    let pass = |dates: &[(u32, u32)], v: f32| {
        let obs = dates.iter().map(|&(m, d)| Observation { date: date(2021, m, d), bands: vec![constant(2, 2, v), constant(2, 2, v + 1.0)], cloud_mask: vec![false; 4] }).collect();
        stack(Modality::Radar, &["VV", "VH"], obs)
    };
    let asc = pass(&[(1, 1), (2, 1)], -10.0);
    let desc = pass(&[(2, 1), (3, 1)], -20.0);
    let inc = constant(2, 2, 35.0);
    let s = composite::stack_radar_channels(&asc, &desc, &inc).unwrap();
    assert_eq!(s.band_names(), composite::RADAR_BANDS.map(String::from).as_slice());
    assert_eq!(s.len(), 3);
    assert!(!s.observations()[0].bands[2].is_valid(0));
    assert!(s.observations()[1].bands[2].is_valid(0));
    let c = composite::seasonal_composite(&s, Reducer::Mean, &SeasonWindows::quarters()).unwrap();
    let got: Vec<f64> = c.seasons[0].iter().map(|g| g.get_f64(3)).collect();
    assert_eq!(got, vec![-10.0, -9.0, -20.0, -19.0, 35.0]);
    let other_size = Observation { date: date(2021, 1, 1), bands: vec![constant(3, 2, 0.0), constant(3, 2, 0.0)], cloud_mask: vec![false; 6] };
    let mismatched = stack(Modality::Radar, &["VV", "VH"], vec![other_size]);
    assert!(composite::stack_radar_channels(&asc, &mismatched, &inc).is_err());
}

#[test]
fn manifest_with_cloud_masks_loads() {
    let dir = tempfile::tempdir().unwrap();
    for (k, v) in [1.0f32, 2.0].iter().enumerate() {
        ntg1::write_grid(&constant(3, 2, *v), dir.path().join(format!("b{k}.ntg1"))).unwrap();
    }
    let cloud = Grid::from_u8(3, 2, common::transform(10.0), vec![1, 0, 0, 0, 0, 1]).unwrap();
    ntg1::write_grid(&cloud, dir.path().join("cloud.ntg1")).unwrap();
    let manifest = r#"{
        "modality": "optical",
        "band_names": ["B1"],
        "observations": [
            {"date": "2021-01-02", "bands": [{"name": "B1", "path": "b0.ntg1"}], "cloud_mask": "cloud.ntg1"},
            {"date": "2021-01-09", "bands": [{"name": "B1", "path": "b1.ntg1"}]}
        ]
    }"#;
    let path = dir.path().join("m.json");
    std::fs::write(&path, manifest).unwrap();
    let s = composite::load_manifest(&path).unwrap();
    assert_eq!(s.len(), 2);
    assert!((s.observations()[0].cloud_fraction() - 2.0 / 6.0).abs() < 1e-12);
    let c = composite::seasonal_composite(&s, Reducer::Median, &SeasonWindows::quarters()).unwrap();
    assert_eq!(c.seasons[0][0].get_f64(0), 2.0);
    assert_eq!(c.seasons[0][0].get_f64(1), 1.5);

    std::fs::write(&path, manifest.replace("\"B1\", \"path\": \"b1", "\"B2\", \"path\": \"b1")).unwrap();
    assert!(composite::load_manifest(&path).is_err());
    std::fs::write(&path, manifest.replace("cloud_mask", "clouds")).unwrap();
    assert!(composite::load_manifest(&path).is_err());
}

#[test]
fn out_of_order_observations_are_rejected() {
    let obs = vec![
        Observation { date: date(2021, 2, 1), bands: vec![constant(2, 2, 1.0)], cloud_mask: vec![false; 4] },
        Observation { date: date(2021, 1, 1), bands: vec![constant(2, 2, 1.0)], cloud_mask: vec![false; 4] },
    ];
    let t = common::transform(10.0);
    assert!(ObservationStack::new(Modality::Optical, vec!["B1".into()], 2, 2, t, obs).is_err());
}

#[test]
fn cloud_filter_is_monotone_in_threshold() {
    let mut rng = common::rng(3);
    let obs = (1..=20)
        .map(|k| Observation { date: date(2021, 1, k), bands: vec![constant(5, 4, k as f32)], cloud_mask: (0..20).map(|_| rng.gen_bool(0.4)).collect() })
        .collect();
    let s = stack(Modality::Optical, &["B1"], obs);
    let mut last = 0;
    for t in [0.0, 0.2, 0.4, 0.6, 1.0] {
        let kept = composite::cloud_filter(&s, t).unwrap();
        assert!(kept.len() >= last);
        assert!(kept.observations().iter().all(|o| o.cloud_fraction() <= t));
        last = kept.len();
    }
    assert_eq!(last, 20);
}
