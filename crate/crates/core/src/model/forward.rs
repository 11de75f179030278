use rayon::prelude::*;

use crate::composite::SeasonalComposite;
use crate::raster::{Grid, GridTransform};

use super::config::{CrossAttention, ModelConfig};
use super::ops::{attention, encoder_layer, layer_norm, linear, mlp, residual, Scope};
use super::params::{DecoderLayer, EncoderSet, ParamSet};
use super::{ModelError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    S1,
    S2,
    Fused,
}

/// Seasonal stack in `T x H x W x C` order.
#[derive(Clone, Debug, PartialEq)]
pub struct InputStack {
    pub seasons: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl InputStack {
    pub fn new(seasons: usize, height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<InputStack> {
        if data.len() != seasons * height * width * channels {
            return Err(ModelError::Shape(format!(
                "stack of {seasons}x{height}x{width}x{channels} needs {} values, got {}",
                seasons * height * width * channels,
                data.len()
            )));
        }
        Ok(InputStack { seasons, height, width, channels, data })
    }

    pub fn from_composite(c: &SeasonalComposite) -> InputStack {
        InputStack { seasons: c.seasons.len(), height: c.height(), width: c.width(), channels: c.band_count(), data: c.to_thwc() }
    }

    pub fn at(&self, t: usize, y: usize, x: usize, c: usize) -> f32 {
        self.data[((t * self.height + y) * self.width + x) * self.channels + c]
    }

    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Result<InputStack> {
        if x0 + width > self.width || y0 + height > self.height {
            return Err(ModelError::Shape(format!("crop {width}x{height}+{x0}+{y0} exceeds {}x{}", self.width, self.height)));
        }
        let c = self.channels;
        let mut data = Vec::with_capacity(self.seasons * width * height * c);
        for t in 0..self.seasons {
            for y in y0..y0 + height {
                let start = ((t * self.height + y) * self.width + x0) * c;
                data.extend_from_slice(&self.data[start..start + width * c]);
            }
        }
        Ok(InputStack { seasons: self.seasons, height, width, channels: c, data })
    }
}

/// `N x dim` tokens with `N = t * gh * gw`, row-major in `(t, row, col)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenTensor {
    pub stream: Stream,
    pub t: usize,
    pub gh: usize,
    pub gw: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl TokenTensor {
    pub fn len(&self) -> usize {
        self.t * self.gh * self.gw
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, t: usize, row: usize, col: usize) -> usize {
        (t * self.gh + row) * self.gw + col
    }

    pub fn token(&self, n: usize) -> &[f32] {
        &self.data[n * self.dim..(n + 1) * self.dim]
    }

    fn same_layout(&self, other: &TokenTensor) -> bool {
        (self.t, self.gh, self.gw, self.dim) == (other.t, other.gh, other.gw, other.dim)
    }

    /// One scope per time slice over its spatial tokens.
    pub fn spatial_scopes(&self) -> Vec<Scope> {
        let g = self.gh * self.gw;
        (0..self.t).map(|t| (t * g..(t + 1) * g).collect::<Vec<_>>()).map(|v| (v.clone(), v)).collect()
    }

    /// One scope per spatial position over its time steps.
    pub fn temporal_scopes(&self) -> Vec<Scope> {
        let g = self.gh * self.gw;
        (0..g).map(|p| (0..self.t).map(|t| t * g + p).collect::<Vec<_>>()).map(|v| (v.clone(), v)).collect()
    }

    pub fn full_scope(&self) -> Vec<Scope> {
        let all: Vec<usize> = (0..self.len()).collect();
        vec![(all.clone(), all)]
    }
}

/// `H x W x C` pixels to `(H/p)(W/p)` blocks of `p*p*C` values, each block
/// flattened in `(dy, dx, c)` order.
pub fn fold_pixels(pixels: &[f32], height: usize, width: usize, channels: usize, p: usize) -> Vec<f32> {
    let (gh, gw) = (height / p, width / p);
    let block = p * p * channels;
    let mut out = vec![0.0f32; gh * gw * block];
    for y in 0..gh * p {
        for x in 0..gw * p {
            let n = (y / p) * gw + x / p;
            let off = n * block + ((y % p) * p + x % p) * channels;
            let src = (y * width + x) * channels;
            out[off..off + channels].copy_from_slice(&pixels[src..src + channels]);
        }
    }
    out
}

/// Inverse of [`fold_pixels`].
pub fn unfold_pixels(blocks: &[f32], gh: usize, gw: usize, channels: usize, p: usize) -> Vec<f32> {
    let (height, width) = (gh * p, gw * p);
    let block = p * p * channels;
    let mut out = vec![0.0f32; height * width * channels];
    for y in 0..height {
        for x in 0..width {
            let n = (y / p) * gw + x / p;
            let off = n * block + ((y % p) * p + x % p) * channels;
            let dst = (y * width + x) * channels;
            out[dst..dst + channels].copy_from_slice(&blocks[off..off + channels]);
        }
    }
    out
}

/// Splits the stack into `patch_t x patch_hw x patch_hw` blocks and projects
/// each through the stream's patch embedding.
pub fn tokenize(input: &InputStack, params: &ParamSet, stream: Stream) -> Result<TokenTensor> {
    let c = &params.config;
    let (embed, channels) = match stream {
        Stream::S1 => (&params.s1_embed, c.s1_channels),
        Stream::S2 => (&params.s2_embed, c.s2_channels),
        Stream::Fused => return Err(ModelError::Layout("only input streams can be tokenized".into())),
    };
    if input.channels != channels {
        return Err(ModelError::Shape(format!("{stream:?} input has {} channels, config expects {channels}", input.channels)));
    }
    if input.seasons != c.seasons {
        return Err(ModelError::Shape(format!("input has {} seasons, config expects {}", input.seasons, c.seasons)));
    }
    let p = c.patch_hw;
    if input.height == 0 || input.width == 0 || input.height % p != 0 || input.width % p != 0 {
        return Err(ModelError::Shape(format!("{}x{} input is not divisible into {p}x{p} patches", input.height, input.width)));
    }
    let (gh, gw) = (input.height / p, input.width / p);
    let slice = input.height * input.width * channels;
    let block = p * p * channels;
    let t_tokens = input.seasons / c.patch_t;
    let folded: Vec<Vec<f32>> = (0..input.seasons)
        .map(|t| fold_pixels(&input.data[t * slice..(t + 1) * slice], input.height, input.width, channels, p))
        .collect();
    let width = c.patch_t * block;
    let mut flat = vec![0.0f32; t_tokens * gh * gw * width];
    for tt in 0..t_tokens {
        for n in 0..gh * gw {
            let row = &mut flat[(tt * gh * gw + n) * width..(tt * gh * gw + n + 1) * width];
            for dt in 0..c.patch_t {
                row[dt * block..(dt + 1) * block].copy_from_slice(&folded[tt * c.patch_t + dt][n * block..(n + 1) * block]);
            }
        }
    }
    let data = linear(&flat, t_tokens * gh * gw, embed);
    Ok(TokenTensor { stream, t: t_tokens, gh, gw, dim: c.embed_dim, data })
}

fn add_positions(tokens: &mut TokenTensor, table: &[f32], per_time: bool) -> Result<()> {
    let d = tokens.dim;
    let g = tokens.gh * tokens.gw;
    let rows = if per_time { tokens.t } else { g };
    if table.len() != rows * d {
        return Err(ModelError::Shape(format!(
            "positional table has {} rows, token layout needs {rows}",
            table.len() / d.max(1)
        )));
    }
    for (n, tok) in tokens.data.chunks_mut(d).enumerate() {
        let r = if per_time { n / g } else { n % g };
        for (v, p) in tok.iter_mut().zip(&table[r * d..(r + 1) * d]) {
            *v += p;
        }
    }
    Ok(())
}

/// Adds the spatial table and applies the spatial layers; every time slice
/// attends only within itself.
pub fn encode_spatial(tokens: &TokenTensor, set: &EncoderSet, config: &ModelConfig) -> Result<TokenTensor> {
    let mut out = tokens.clone();
    if let Some(pos) = &set.spatial_pos {
        add_positions(&mut out, &pos.data, false)?;
    }
    let scopes = out.spatial_scopes();
    for layer in &set.spatial {
        encoder_layer(layer, &mut out.data, out.dim, config.heads, &scopes, config.layer_norm_eps);
    }
    Ok(out)
}

/// Adds the temporal table, applies the temporal layers per spatial position
/// and the encoder's closing norm.
pub fn encode_temporal(tokens: &TokenTensor, set: &EncoderSet, config: &ModelConfig) -> Result<TokenTensor> {
    let mut out = tokens.clone();
    if let Some(pos) = &set.temporal_pos {
        add_positions(&mut out, &pos.data, true)?;
    }
    let scopes = out.temporal_scopes();
    for layer in &set.temporal {
        encoder_layer(layer, &mut out.data, out.dim, config.heads, &scopes, config.layer_norm_eps);
    }
    out.data = layer_norm(&out.data, out.dim, &set.norm, config.layer_norm_eps);
    Ok(out)
}

fn run_decoder(layers: &[DecoderLayer], queries: &TokenTensor, memory: &TokenTensor, config: &ModelConfig) -> Vec<f32> {
    let d = queries.dim;
    let eps = config.layer_norm_eps;
    let scope = queries.full_scope();
    let rows = queries.len();
    let mut x = queries.data.clone();
    for layer in layers {
        let h = layer_norm(&x, d, &layer.norm_self, eps);
        residual(&mut x, &attention(&layer.self_attn, &h, &h, d, config.heads, &scope, false).output);
        let h = layer_norm(&x, d, &layer.norm_cross, eps);
        residual(&mut x, &attention(&layer.cross_attn, &h, &memory.data, d, config.heads, &scope, false).output);
        let h = layer_norm(&x, d, &layer.norm_mlp, eps);
        residual(&mut x, &mlp(&h, rows, &layer.mlp));
    }
    x
}

/// Decoder fusion: self-attention over the query stream, cross-attention
/// into the other stream, MLP; then the final norm.
pub fn decode_fuse(s1: &TokenTensor, s2: &TokenTensor, params: &ParamSet) -> Result<TokenTensor> {
    if !s1.same_layout(s2) {
        return Err(ModelError::Layout(format!(
            "s1 tokens {}x{}x{}x{} vs s2 tokens {}x{}x{}x{}",
            s1.t, s1.gh, s1.gw, s1.dim, s2.t, s2.gh, s2.gw, s2.dim
        )));
    }
    let c = &params.config;
    let fused = match c.cross_attention {
        CrossAttention::S2QueriesS1 => run_decoder(&params.decoders[0], s2, s1, c),
        CrossAttention::S1QueriesS2 => run_decoder(&params.decoders[0], s1, s2, c),
        CrossAttention::Bidirectional => {
            let a = run_decoder(&params.decoders[0], s2, s1, c);
            let b = run_decoder(&params.decoders[1], s1, s2, c);
            a.iter().zip(&b).map(|(x, y)| 0.5 * (x + y)).collect()
        }
    };
    let data = layer_norm(&fused, s2.dim, &params.final_norm, c.layer_norm_eps);
    Ok(TokenTensor { stream: Stream::Fused, data, ..s2.clone() })
}

/// Per-pixel class scores in `H x W x K` order.
#[derive(Clone, Debug, PartialEq)]
pub struct Logits {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub data: Vec<f32>,
}

impl Logits {
    pub fn at(&self, y: usize, x: usize, k: usize) -> f32 {
        self.data[(y * self.width + x) * self.classes + k]
    }

    /// One f32 grid per class.
    pub fn to_grids(&self, transform: &GridTransform) -> Result<Vec<Grid>> {
        (0..self.classes)
            .map(|k| {
                let plane: Vec<f32> = self.data.iter().skip(k).step_by(self.classes).copied().collect();
                Grid::from_f32(self.width, self.height, transform.clone(), plane).map_err(|e| ModelError::Shape(e.to_string()))
            })
            .collect()
    }
}

/// Averages fused tokens over time, maps each spatial token to
/// `patch_hw^2 * K` values and unfolds them into pixels.
pub fn segment_head(tokens: &TokenTensor, params: &ParamSet) -> Result<Logits> {
    let c = &params.config;
    let d = tokens.dim;
    if d != c.embed_dim {
        return Err(ModelError::Shape(format!("token dim {d}, config embed_dim {}", c.embed_dim)));
    }
    let g = tokens.gh * tokens.gw;
    let mut pooled = vec![0.0f32; g * d];
    for t in 0..tokens.t {
        for (p, v) in pooled.iter_mut().zip(&tokens.data[t * g * d..(t + 1) * g * d]) {
            *p += v;
        }
    }
    let inv = 1.0 / tokens.t as f32;
    pooled.iter_mut().for_each(|v| *v *= inv);
    let blocks = mlp(&pooled, g, &params.head);
    let p = c.patch_hw;
    Ok(Logits {
        height: tokens.gh * p,
        width: tokens.gw * p,
        classes: c.num_classes,
        data: unfold_pixels(&blocks, tokens.gh, tokens.gw, c.num_classes, p),
    })
}

/// Full forward pass on one window.
pub fn forward(s1: &InputStack, s2: &InputStack, params: &ParamSet) -> Result<Logits> {
    let c = &params.config;
    if (s1.height, s1.width) != (s2.height, s2.width) {
        return Err(ModelError::Layout(format!("s1 is {}x{}, s2 is {}x{}", s1.height, s1.width, s2.height, s2.width)));
    }
    let encode = |input: &InputStack, stream: Stream, set: &EncoderSet| -> Result<TokenTensor> {
        let tokens = tokenize(input, params, stream)?;
        let spatial = encode_spatial(&tokens, set, c)?;
        encode_temporal(&spatial, set, c)
    };
    let t1 = encode(s1, Stream::S1, params.encoder_for(0))?;
    let t2 = encode(s2, Stream::S2, params.encoder_for(1))?;
    let fused = decode_fuse(&t1, &t2, params)?;
    segment_head(&fused, params)
}

/// Runs [`forward`] on every `image_size` window of a scene whose sides are
/// multiples of the window, and stitches the logits.
pub fn forward_tiled(s1: &InputStack, s2: &InputStack, params: &ParamSet) -> Result<Logits> {
    let size = params.config.image_size;
    let (h, w) = (s2.height, s2.width);
    if h % size != 0 || w % size != 0 || (s1.height, s1.width) != (h, w) {
        return Err(ModelError::Shape(format!("scene {w}x{h} is not tiled by {size}x{size} windows")));
    }
    let windows: Vec<(usize, usize)> = (0..h / size).flat_map(|r| (0..w / size).map(move |c| (c * size, r * size))).collect();
    let tiles: Vec<Logits> = windows
        .par_iter()
        .map(|&(x0, y0)| forward(&s1.crop(x0, y0, size, size)?, &s2.crop(x0, y0, size, size)?, params))
        .collect::<Result<_>>()?;
    let k = params.config.num_classes;
    let mut data = vec![0.0f32; h * w * k];
    for (&(x0, y0), tile) in windows.iter().zip(&tiles) {
        for y in 0..size {
            let dst = ((y0 + y) * w + x0) * k;
            data[dst..dst + size * k].copy_from_slice(&tile.data[y * size * k..(y + 1) * size * k]);
        }
    }
    Ok(Logits { height: h, width: w, classes: k, data })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::PositionalEmbedding;
    use crate::model::params::Module;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small() -> ModelConfig {
        ModelConfig { embed_dim: 16, heads: 2, patch_hw: 4, image_size: 16, num_classes: 3, s1_channels: 2, s2_channels: 3, ..ModelConfig::default() }
    }

    fn random_stack(c: &ModelConfig, channels: usize, size: usize, seed: u64) -> InputStack {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = c.seasons * size * size * channels;
        InputStack::new(c.seasons, size, size, channels, (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
    }

    fn zeroed(mut p: ParamSet) -> ParamSet {
        p.visit_mut("", &mut |_, t| t.data.fill(0.0));
        p
    }

    #[test]
    fn fold_unfold_is_a_bijection() {
        let (h, w, c, p) = (8, 12, 2, 4);
        let x: Vec<f32> = (0..h * w * c).map(|i| i as f32).collect();
        let blocks = fold_pixels(&x, h, w, c, p);
        let mut seen = blocks.clone();
        seen.sort_by(f32::total_cmp);
        assert_eq!(seen, x);
        assert_eq!(unfold_pixels(&blocks, h / p, w / p, c, p), x);
        // block 4 is row-block 1, col-block 1; its first entry is pixel (4, 4)
        assert_eq!(blocks[4 * p * p * c], ((4 * w + 4) * c) as f32);
    }

    #[test]
    fn tokenize_counts_and_order() {
        let c = ModelConfig::default();
        let p = ParamSet::init(&c, 1).unwrap();
        let s2 = random_stack(&c, 10, 128, 2);
        let tok = tokenize(&s2, &p, Stream::S2).unwrap();
        assert_eq!((tok.len(), tok.dim, tok.data.len()), (1024, 192, 1024 * 192));
        let block: Vec<f32> = (0..8).flat_map(|dy| (0..8).flat_map(move |dx| (0..10).map(move |ch| (dy, dx, ch)))).map(|(dy, dx, ch)| s2.at(2, 8 + dy, 24 + dx, ch)).collect();
        let expected = linear(&block, 1, &p.s2_embed);
        assert_eq!(tok.token(tok.index(2, 1, 3)), &expected[..]);
    }

    #[test]
    fn zero_input_and_bias_give_zero_tokens() {
        let c = small();
        let mut p = ParamSet::init(&c, 1).unwrap();
        p.s1_embed.bias.data.fill(0.0);
        let zero = InputStack::new(4, 16, 16, 2, vec![0.0; 4 * 16 * 16 * 2]).unwrap();
        assert!(tokenize(&zero, &p, Stream::S1).unwrap().data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn indivisible_or_mismatched_input_is_rejected() {
        let c = small();
        let p = ParamSet::init(&c, 1).unwrap();
        let odd = InputStack::new(4, 18, 16, 2, vec![0.0; 4 * 18 * 16 * 2]).unwrap();
        assert!(matches!(tokenize(&odd, &p, Stream::S1), Err(ModelError::Shape(_))));
        let wrong_c = random_stack(&c, 3, 16, 1);
        assert!(tokenize(&wrong_c, &p, Stream::S1).is_err());
    }

    #[test]
    fn zero_weights_make_encoders_identity_before_norm() {
        let c = ModelConfig { positional: PositionalEmbedding::None, ..small() };
        let init = ParamSet::init(&c, 4).unwrap();
        let tok = tokenize(&random_stack(&c, 3, 16, 5), &init, Stream::S2).unwrap();
        let p = zeroed(init);
        assert_eq!(encode_spatial(&tok, &p.encoders[0], &c).unwrap(), tok);
    }

    fn permute_spatial(tok: &TokenTensor, perm: &[usize]) -> TokenTensor {
        let g = tok.gh * tok.gw;
        let mut out = tok.clone();
        for t in 0..tok.t {
            for (dst, &src) in perm.iter().enumerate() {
                let (a, b) = ((t * g + dst) * tok.dim, (t * g + src) * tok.dim);
                out.data[a..a + tok.dim].copy_from_slice(&tok.data[b..b + tok.dim]);
            }
        }
        out
    }

    fn assert_close(a: &[f32], b: &[f32], tol: f32) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{x} vs {y}");
        }
    }

    #[test]
    fn spatial_encoder_is_permutation_equivariant_without_positions() {
        let c = ModelConfig { positional: PositionalEmbedding::None, ..small() };
        let p = ParamSet::init(&c, 6).unwrap();
        let tok = tokenize(&random_stack(&c, 3, 16, 7), &p, Stream::S2).unwrap();
        let mut perm: Vec<usize> = (0..16).collect();
        perm.reverse();
        perm.swap(0, 5);
        let a = permute_spatial(&encode_spatial(&tok, &p.encoders[0], &c).unwrap(), &perm);
        let b = encode_spatial(&permute_spatial(&tok, &perm), &p.encoders[0], &c).unwrap();
        assert_close(&a.data, &b.data, 1e-5);
    }

    #[test]
    fn temporal_encoder_is_permutation_equivariant_without_positions() {
        let c = ModelConfig { positional: PositionalEmbedding::None, ..small() };
        let p = ParamSet::init(&c, 6).unwrap();
        let tok = tokenize(&random_stack(&c, 3, 16, 8), &p, Stream::S2).unwrap();
        let order = [2usize, 0, 3, 1];
        let permute = |x: &TokenTensor| {
            let g = x.gh * x.gw * x.dim;
            let mut out = x.clone();
            for (dst, &src) in order.iter().enumerate() {
                out.data[dst * g..(dst + 1) * g].copy_from_slice(&x.data[src * g..(src + 1) * g]);
            }
            out
        };
        let a = permute(&encode_temporal(&tok, &p.encoders[0], &c).unwrap());
        let b = encode_temporal(&permute(&tok), &p.encoders[0], &c).unwrap();
        assert_close(&a.data, &b.data, 1e-5);
    }

    #[test]
    fn positions_break_equivariance() {
        let c = small();
        let p = ParamSet::init(&c, 6).unwrap();
        let tok = tokenize(&random_stack(&c, 3, 16, 7), &p, Stream::S2).unwrap();
        let perm: Vec<usize> = (0..16).rev().collect();
        let a = permute_spatial(&encode_spatial(&tok, &p.encoders[0], &c).unwrap(), &perm);
        let b = encode_spatial(&permute_spatial(&tok, &perm), &p.encoders[0], &c).unwrap();
        assert_ne!(a.data, b.data);
    }

    #[test]
    fn cross_attention_zero_output_passes_query_stream() {
        let c = small();
        let mut p = ParamSet::init(&c, 11).unwrap();
        for layer in &mut p.decoders[0] {
            layer.cross_attn.output.weight.data.fill(0.0);
            layer.cross_attn.output.bias.data.fill(0.0);
        }
        let t1 = tokenize(&random_stack(&c, 2, 16, 1), &p, Stream::S1).unwrap();
        let t2 = tokenize(&random_stack(&c, 3, 16, 2), &p, Stream::S2).unwrap();
        let other = tokenize(&random_stack(&c, 2, 16, 3), &p, Stream::S1).unwrap();
        let a = decode_fuse(&t1, &t2, &p).unwrap();
        assert_eq!(a.data.len(), t2.data.len());
        assert_eq!(a, decode_fuse(&other, &t2, &p).unwrap());
    }

    #[test]
    fn fusion_is_sensitive_to_radar_content() {
        let c = small();
        let p = ParamSet::init(&c, 11).unwrap();
        let t1 = tokenize(&random_stack(&c, 2, 16, 1), &p, Stream::S1).unwrap();
        let t2 = tokenize(&random_stack(&c, 3, 16, 2), &p, Stream::S2).unwrap();
        let other = tokenize(&random_stack(&c, 2, 16, 3), &p, Stream::S1).unwrap();
        assert_ne!(decode_fuse(&t1, &t2, &p).unwrap(), decode_fuse(&other, &t2, &p).unwrap());
    }

    #[test]
    fn mismatched_layouts_are_rejected() {
        let c = small();
        let p = ParamSet::init(&c, 11).unwrap();
        let t1 = tokenize(&random_stack(&c, 2, 16, 1), &p, Stream::S1).unwrap();
        let t2 = tokenize(&random_stack(&c, 3, 8, 2), &p, Stream::S2).unwrap();
        assert!(matches!(decode_fuse(&t1, &t2, &p), Err(ModelError::Layout(_))));
    }

    #[test]
    fn zero_head_gives_zero_logits() {
        let c = small();
        let mut p = ParamSet::init(&c, 12).unwrap();
        p.head.fc2.weight.data.fill(0.0);
        p.head.fc2.bias.data.fill(0.0);
        let l = forward(&random_stack(&c, 2, 16, 1), &random_stack(&c, 3, 16, 2), &p).unwrap();
        assert_eq!((l.height, l.width, l.classes), (16, 16, 3));
        assert!(l.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn every_mode_runs_and_is_deterministic() {
        for mode in [CrossAttention::S2QueriesS1, CrossAttention::S1QueriesS2, CrossAttention::Bidirectional] {
            for share in [true, false] {
                let c = ModelConfig { cross_attention: mode, share_encoders: share, ..small() };
                let p = ParamSet::init(&c, 13).unwrap();
                let (s1, s2) = (random_stack(&c, 2, 16, 1), random_stack(&c, 3, 16, 2));
                let a = forward(&s1, &s2, &p).unwrap();
                assert!(a.data.iter().all(|v| v.is_finite()));
                assert_eq!(a, forward(&s1, &s2, &p).unwrap());
            }
        }
    }

    #[test]
    fn tiled_forward_matches_per_window_forward() {
        let c = small();
        let p = ParamSet::init(&c, 14).unwrap();
        let s1 = InputStack::new(4, 32, 48, 2, (0..4 * 32 * 48 * 2).map(|i| ((i * 37) % 101) as f32 / 50.0 - 1.0).collect()).unwrap();
        let s2 = InputStack::new(4, 32, 48, 3, (0..4 * 32 * 48 * 3).map(|i| ((i * 53) % 97) as f32 / 48.0 - 1.0).collect()).unwrap();
        let tiled = forward_tiled(&s1, &s2, &p).unwrap();
        assert_eq!((tiled.height, tiled.width), (32, 48));
        let win = forward(&s1.crop(16, 16, 16, 16).unwrap(), &s2.crop(16, 16, 16, 16).unwrap(), &p).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                for k in 0..3 {
                    assert_eq!(tiled.at(16 + y, 16 + x, k), win.at(y, x, k));
                }
            }
        }
        assert!(forward_tiled(&s1.crop(0, 0, 40, 32).unwrap(), &s2.crop(0, 0, 40, 32).unwrap(), &p).is_err());
    }

    #[test]
    fn logits_convert_to_class_grids() {
        let l = Logits { height: 1, width: 2, classes: 2, data: vec![1.0, 2.0, 3.0, 4.0] };
        let g = l.to_grids(&GridTransform::new(0.0, 0.0, 10.0, "t").unwrap()).unwrap();
        assert_eq!(g[0].as_f32().unwrap(), &[1.0, 3.0]);
        assert_eq!(g[1].as_f32().unwrap(), &[2.0, 4.0]);
    }
}
