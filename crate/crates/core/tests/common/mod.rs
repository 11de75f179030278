//! Brute-force reference implementations shared by the integration suites.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};
use tcmap_core::raster::{GridTransform, RegionMask};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn transform(pixel: f64) -> GridTransform {
    GridTransform::new(1000.0, 5000.0, pixel, "test").unwrap()
}

pub fn fixture(name: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}

pub fn random_bools(rng: &mut ChaCha8Rng, n: usize, p: f64) -> Vec<bool> {
    (0..n).map(|_| rng.gen_bool(p)).collect()
}

pub fn mask(width: usize, height: usize, pixel: f64, members: &[bool]) -> RegionMask {
    RegionMask::from_bools(width, height, transform(pixel), members, "m").unwrap()
}

/// All-pairs distance in meters from each pixel to the nearest member.
pub fn brute_distance(members: &[bool], width: usize, height: usize, pixel: f64) -> Vec<f64> {
    let sites: Vec<(f64, f64)> =
        (0..width * height).filter(|&i| members[i]).map(|i| ((i / width) as f64, (i % width) as f64)).collect();
    (0..width * height)
        .map(|i| {
            let (r, c) = ((i / width) as f64, (i % width) as f64);
            sites
                .iter()
                .map(|&(sr, sc)| ((sr - r).powi(2) + (sc - c).powi(2)).sqrt() * pixel)
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

/// Non-member pixels within `radius` meters of a member, by direct search.
pub fn brute_dilation(members: &[bool], width: usize, height: usize, pixel: f64, radius: f64) -> Vec<bool> {
    let reach = (radius / pixel).floor() as i64;
    (0..width * height)
        .map(|i| {
            if members[i] {
                return false;
            }
            let (r, c) = ((i / width) as i64, (i % width) as i64);
            (-reach..=reach).any(|dr| {
                (-reach..=reach).any(|dc| {
                    let (rr, cc) = (r + dr, c + dc);
                    rr >= 0
                        && cc >= 0
                        && rr < height as i64
                        && cc < width as i64
                        && members[(rr * width as i64 + cc) as usize]
                        && ((dr * dr + dc * dc) as f64) * pixel * pixel <= radius * radius
                })
            })
        })
        .collect()
}

/// `A_i = A * sum_h W_h n_hi / n_h`, evaluated term by term.
pub fn brute_adjusted_area(counts: &[Vec<u64>], areas: &[f64]) -> Vec<f64> {
    let total: f64 = areas.iter().sum();
    let classes = counts[0].len();
    (0..classes)
        .map(|i| {
            let mut s = 0.0;
            for (h, row) in counts.iter().enumerate() {
                let n_h: u64 = row.iter().sum();
                s += (areas[h] / total) * row[i] as f64 / n_h as f64;
            }
            total * s
        })
        .collect()
}

/// Upper-tail p-value of Pearson's statistic for observed vs expected counts.
pub fn chi_square_p(observed: &[u64], expected: &[f64]) -> f64 {
    let stat: f64 = observed.iter().zip(expected).map(|(&o, &e)| (o as f64 - e).powi(2) / e).sum();
    let dist = ChiSquared::new((observed.len() - 1) as f64).unwrap();
    1.0 - dist.cdf(stat)
}

/// Median of a non-empty list, averaging the two central values.
pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// ECE with equal-width bins over `[0, 1]`, last bin closed.
pub fn brute_ece(confidence: &[f64], correct: &[bool], bins: usize) -> f64 {
    let n = confidence.len() as f64;
    let mut total = 0.0;
    for b in 0..bins {
        let (lo, hi) = (b as f64 / bins as f64, (b + 1) as f64 / bins as f64);
        let members: Vec<usize> = (0..confidence.len())
            .filter(|&i| confidence[i] >= lo && (confidence[i] < hi || (b == bins - 1 && confidence[i] <= hi)))
            .collect();
        if members.is_empty() {
            continue;
        }
        let m = members.len() as f64;
        let acc = members.iter().filter(|&&i| correct[i]).count() as f64 / m;
        let conf = members.iter().map(|&i| confidence[i]).sum::<f64>() / m;
        total += m / n * (acc - conf).abs();
    }
    total
}
