//! Dense kernels. Every output element is accumulated sequentially, so
//! results do not depend on the rayon pool size.

use rayon::prelude::*;

use super::params::{Attention, EncoderLayer, LayerNorm, Linear, Mlp};

/// `x (rows x in) -> rows x out`.
pub fn linear(x: &[f32], rows: usize, l: &Linear) -> Vec<f32> {
    let (input, output) = (l.input_dim(), l.output_dim());
    assert_eq!(x.len(), rows * input, "linear input has wrong length");
    let w = &l.weight.data;
    let b = &l.bias.data;
    let mut out = vec![0.0f32; rows * output];
    out.par_chunks_mut(output).zip(x.par_chunks(input)).for_each(|(o, xr)| {
        o.copy_from_slice(b);
        for (k, &xv) in xr.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            let wr = &w[k * output..(k + 1) * output];
            for (ov, &wv) in o.iter_mut().zip(wr) {
                *ov += xv * wv;
            }
        }
    });
    out
}

pub fn layer_norm(x: &[f32], d: usize, ln: &LayerNorm, eps: f32) -> Vec<f32> {
    let mut out = vec![0.0f32; x.len()];
    out.par_chunks_mut(d).zip(x.par_chunks(d)).for_each(|(o, xr)| {
        let mean = xr.iter().sum::<f32>() / d as f32;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
        let inv = 1.0 / (var + eps).sqrt();
        for i in 0..d {
            o[i] = (xr[i] - mean) * inv * ln.gamma.data[i] + ln.beta.data[i];
        }
    });
    out
}

/// Tanh approximation.
pub fn gelu(x: f32) -> f32 {
    const C: f32 = 0.797_884_6; // sqrt(2 / pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

pub fn mlp(x: &[f32], rows: usize, m: &Mlp) -> Vec<f32> {
    let mut h = linear(x, rows, &m.fc1);
    h.par_iter_mut().for_each(|v| *v = gelu(*v));
    linear(&h, rows, &m.fc2)
}

/// Attention scope: query token indices attend to key token indices.
pub type Scope = (Vec<usize>, Vec<usize>);

#[derive(Clone, Debug)]
pub struct AttentionOutput {
    /// `rows x d`; rows outside every scope are zero.
    pub output: Vec<f32>,
    /// Per scope, `heads x queries x keys` softmax weights when requested.
    pub probs: Option<Vec<Vec<f32>>>,
}

/// Multi-head scaled dot-product attention. `xq` holds the query stream and
/// `xkv` the key/value stream, both `rows x d` in token order.
pub fn attention(
    attn: &Attention,
    xq: &[f32],
    xkv: &[f32],
    d: usize,
    heads: usize,
    scopes: &[Scope],
    keep_probs: bool,
) -> AttentionOutput {
    let rows_q = xq.len() / d;
    let rows_k = xkv.len() / d;
    let q = linear(xq, rows_q, &attn.query);
    let k = linear(xkv, rows_k, &attn.key);
    let v = linear(xkv, rows_k, &attn.value);
    let hd = d / heads;
    let scale = 1.0 / (hd as f32).sqrt();

    let tasks: Vec<(usize, usize)> = scopes.iter().enumerate().flat_map(|(s, (qs, _))| (0..qs.len()).map(move |i| (s, i))).collect();
    let rows: Vec<(Vec<f32>, Vec<f32>)> = tasks
        .par_iter()
        .map(|&(s, i)| {
            let (qs, ks) = &scopes[s];
            let qi = qs[i];
            let mut ctx = vec![0.0f32; d];
            let mut probs = Vec::with_capacity(if keep_probs { heads * ks.len() } else { 0 });
            let mut w = vec![0.0f32; ks.len()];
            let mut e = vec![0.0f64; ks.len()];
            for h in 0..heads {
                let qrow = &q[qi * d + h * hd..qi * d + (h + 1) * hd];
                let mut max = f32::NEG_INFINITY;
                for (j, &kj) in ks.iter().enumerate() {
                    let krow = &k[kj * d + h * hd..kj * d + (h + 1) * hd];
                    let s = qrow.iter().zip(krow).map(|(a, b)| a * b).sum::<f32>() * scale;
                    w[j] = s;
                    max = max.max(s);
                }
                // normalize in f64 so long rows still sum to 1 after rounding
                let mut sum = 0.0f64;
                for (ej, &s) in e.iter_mut().zip(&w) {
                    *ej = ((s - max) as f64).exp();
                    sum += *ej;
                }
                for (x, &ej) in w.iter_mut().zip(&e) {
                    *x = (ej / sum) as f32;
                }
                let c = &mut ctx[h * hd..(h + 1) * hd];
                for (j, &kj) in ks.iter().enumerate() {
                    let vrow = &v[kj * d + h * hd..kj * d + (h + 1) * hd];
                    for (cv, &vv) in c.iter_mut().zip(vrow) {
                        *cv += w[j] * vv;
                    }
                }
                if keep_probs {
                    probs.extend_from_slice(&w);
                }
            }
            (ctx, probs)
        })
        .collect();

    let mut context = vec![0.0f32; rows_q * d];
    let mut probs: Option<Vec<Vec<f32>>> = keep_probs.then(|| scopes.iter().map(|(qs, ks)| vec![0.0; heads * qs.len() * ks.len()]).collect());
    for (&(s, i), (ctx, p)) in tasks.iter().zip(rows) {
        let (qs, ks) = &scopes[s];
        context[qs[i] * d..(qs[i] + 1) * d].copy_from_slice(&ctx);
        if let Some(all) = probs.as_mut() {
            let nq = qs.len();
            let nk = ks.len();
            for h in 0..heads {
                all[s][(h * nq + i) * nk..(h * nq + i + 1) * nk].copy_from_slice(&p[h * nk..(h + 1) * nk]);
            }
        }
    }
    AttentionOutput { output: linear(&context, rows_q, &attn.output), probs }
}

fn add_in_place(x: &mut [f32], y: &[f32]) {
    x.par_iter_mut().zip(y).for_each(|(a, b)| *a += b);
}

/// Pre-norm block: `x += attn(ln1 x)`, then `x += mlp(ln2 x)`.
pub fn encoder_layer(layer: &EncoderLayer, x: &mut [f32], d: usize, heads: usize, scopes: &[Scope], eps: f32) {
    let rows = x.len() / d;
    let h = layer_norm(x, d, &layer.norm1, eps);
    let a = attention(&layer.attn, &h, &h, d, heads, scopes, false);
    add_in_place(x, &a.output);
    let h = layer_norm(x, d, &layer.norm2, eps);
    add_in_place(x, &mlp(&h, rows, &layer.mlp));
}

pub(crate) fn residual(x: &mut [f32], y: &[f32]) {
    add_in_place(x, y)
}
