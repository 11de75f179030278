//! Exact squared Euclidean distance transform (Felzenszwalb & Huttenlocher
//! lower envelope of parabolas), separable into a column pass and a row pass.
//!
//! All distances are in pixel units and exact: inputs are integers, so
//! every output is an integer-valued `f64`. Pixels with no feature in the
//! whole raster get `f64::INFINITY`.

use rayon::prelude::*;

/// 1-D transform of `f` into `out`. Only finite entries of `f` are sites.
fn transform_1d(f: &[f64], out: &mut [f64], sites: &mut Vec<usize>, bounds: &mut Vec<f64>) {
    sites.clear();
    bounds.clear();
    for (q, &fq) in f.iter().enumerate() {
        if !fq.is_finite() {
            continue;
        }
        let qf = q as f64;
        loop {
            match sites.last() {
                None => {
                    sites.push(q);
                    bounds.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&v) => {
                    let vf = v as f64;
                    let s = ((fq + qf * qf) - (f[v] + vf * vf)) / (2.0 * (qf - vf));
                    if s <= *bounds.last().unwrap() {
                        sites.pop();
                        bounds.pop();
                    } else {
                        sites.push(q);
                        bounds.push(s);
                        break;
                    }
                }
            }
        }
    }
    if sites.is_empty() {
        out.fill(f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        let qf = q as f64;
        while k + 1 < sites.len() && bounds[k + 1] < qf {
            k += 1;
        }
        let v = sites[k];
        let d = qf - v as f64;
        *o = d * d + f[v];
    }
}

/// Squared distance (in pixels²) from every pixel center to the nearest
/// pixel with `features[i] == true`.
pub fn squared_edt(features: &[bool], width: usize, height: usize) -> Vec<f64> {
    assert_eq!(features.len(), width * height);
    if width == 0 || height == 0 {
        return Vec::new();
    }
    // column pass, stored transposed (col-major) so each column is contiguous
    let mut cols = vec![0.0f64; width * height];
    cols.par_chunks_mut(height).enumerate().for_each_init(
        || (vec![0.0; height], Vec::new(), Vec::new()),
        |(f, sites, bounds), (c, out)| {
            for r in 0..height {
                f[r] = if features[r * width + c] { 0.0 } else { f64::INFINITY };
            }
            transform_1d(f, out, sites, bounds);
        },
    );
    let mut result = vec![0.0f64; width * height];
    result.par_chunks_mut(width).enumerate().for_each_init(
        || (vec![0.0; width], Vec::new(), Vec::new()),
        |(f, sites, bounds), (r, out)| {
            for c in 0..width {
                f[c] = cols[c * height + r];
            }
            transform_1d(f, out, sites, bounds);
        },
    );
    result
}
