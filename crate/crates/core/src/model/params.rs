//! Parameter containers, seeded initialization and the on-disk layout
//! (`manifest.json` naming every tensor plus `params.bin`, raw little-endian
//! f32 in manifest order).

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{CrossAttention, ModelConfig, PositionalEmbedding};
use super::{ModelError, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Uniform(f32),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    pub init: Init,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, init: Init) -> Tensor {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n], init }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Named traversal over the tensors of a parameter tree, in a fixed order.
pub trait Module {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor));
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.len());
        n
    }
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl Module for Tensor {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(prefix.to_string(), self)
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        f(prefix.to_string(), self)
    }
}

impl<T: Module> Module for Vec<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        for (i, m) in self.iter().enumerate() {
            m.visit(&join(prefix, &i.to_string()), f);
        }
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        for (i, m) in self.iter_mut().enumerate() {
            m.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}

impl<T: Module> Module for Option<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        if let Some(m) = self {
            m.visit(prefix, f)
        }
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        if let Some(m) = self {
            m.visit_mut(prefix, f)
        }
    }
}

macro_rules! module {
    ($ty:ty { $($field:ident),* $(,)? }) => {
        impl Module for $ty {
            fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
                $( self.$field.visit(&join(prefix, stringify!($field)), f); )*
            }
            fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
                $( self.$field.visit_mut(&join(prefix, stringify!($field)), f); )*
            }
        }
    };
}

/// `y = x W + b` with `W` stored `in x out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}
module!(Linear { weight, bias });

impl Linear {
    pub fn new(input: usize, output: usize) -> Linear {
        let bound = 1.0 / (input as f32).sqrt();
        Linear { weight: Tensor::new(vec![input, output], Init::Uniform(bound)), bias: Tensor::new(vec![output], Init::Uniform(bound)) }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape[1]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
}
module!(LayerNorm { gamma, beta });

impl LayerNorm {
    pub fn new(dim: usize) -> LayerNorm {
        LayerNorm { gamma: Tensor::new(vec![dim], Init::Ones), beta: Tensor::new(vec![dim], Init::Zeros) }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Attention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}
module!(Attention { query, key, value, output });

impl Attention {
    pub fn new(d: usize) -> Attention {
        Attention { query: Linear::new(d, d), key: Linear::new(d, d), value: Linear::new(d, d), output: Linear::new(d, d) }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}
module!(Mlp { fc1, fc2 });

impl Mlp {
    pub fn new(d: usize, hidden: usize, out: usize) -> Mlp {
        Mlp { fc1: Linear::new(d, hidden), fc2: Linear::new(hidden, out) }
    }
}

/// Pre-norm self-attention block.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}
module!(EncoderLayer { norm1, attn, norm2, mlp });

impl EncoderLayer {
    pub fn new(d: usize, mlp_ratio: usize) -> EncoderLayer {
        EncoderLayer { norm1: LayerNorm::new(d), attn: Attention::new(d), norm2: LayerNorm::new(d), mlp: Mlp::new(d, d * mlp_ratio, d) }
    }
}

/// Spatial then temporal encoder with their positional tables.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderSet {
    pub spatial_pos: Option<Tensor>,
    pub temporal_pos: Option<Tensor>,
    pub spatial: Vec<EncoderLayer>,
    pub temporal: Vec<EncoderLayer>,
    pub norm: LayerNorm,
}
module!(EncoderSet { spatial_pos, temporal_pos, spatial, temporal, norm });

impl EncoderSet {
    pub fn new(c: &ModelConfig) -> EncoderSet {
        let d = c.embed_dim;
        let learned = c.positional == PositionalEmbedding::Learned;
        EncoderSet {
            spatial_pos: learned.then(|| Tensor::new(vec![c.grid_tokens() * c.grid_tokens(), d], Init::Uniform(0.02))),
            temporal_pos: learned.then(|| Tensor::new(vec![c.time_tokens(), d], Init::Uniform(0.02))),
            spatial: (0..c.spatial_layers).map(|_| EncoderLayer::new(d, c.mlp_ratio)).collect(),
            temporal: (0..c.temporal_layers).map(|_| EncoderLayer::new(d, c.mlp_ratio)).collect(),
            norm: LayerNorm::new(d),
        }
    }
}

/// Pre-norm self-attention, cross-attention and MLP block.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderLayer {
    pub norm_self: LayerNorm,
    pub self_attn: Attention,
    pub norm_cross: LayerNorm,
    pub cross_attn: Attention,
    pub norm_mlp: LayerNorm,
    pub mlp: Mlp,
}
module!(DecoderLayer { norm_self, self_attn, norm_cross, cross_attn, norm_mlp, mlp });

impl DecoderLayer {
    pub fn new(d: usize, mlp_ratio: usize) -> DecoderLayer {
        DecoderLayer {
            norm_self: LayerNorm::new(d),
            self_attn: Attention::new(d),
            norm_cross: LayerNorm::new(d),
            cross_attn: Attention::new(d),
            norm_mlp: LayerNorm::new(d),
            mlp: Mlp::new(d, d * mlp_ratio, d),
        }
    }
}

/// All weights of the model.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    pub config: ModelConfig,
    pub s1_embed: Linear,
    pub s2_embed: Linear,
    /// One shared set, or `[s1, s2]`.
    pub encoders: Vec<EncoderSet>,
    /// One decoder, or `[s2 queries s1, s1 queries s2]` when bidirectional.
    pub decoders: Vec<Vec<DecoderLayer>>,
    pub final_norm: LayerNorm,
    /// Per-token head producing `patch_hw^2 * num_classes` values.
    pub head: Mlp,
}

impl Module for ParamSet {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.s1_embed.visit(&join(prefix, "s1_embed"), f);
        self.s2_embed.visit(&join(prefix, "s2_embed"), f);
        self.encoders.visit(&join(prefix, "encoders"), f);
        self.decoders.visit(&join(prefix, "decoders"), f);
        self.final_norm.visit(&join(prefix, "final_norm"), f);
        self.head.visit(&join(prefix, "head"), f);
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        self.s1_embed.visit_mut(&join(prefix, "s1_embed"), f);
        self.s2_embed.visit_mut(&join(prefix, "s2_embed"), f);
        self.encoders.visit_mut(&join(prefix, "encoders"), f);
        self.decoders.visit_mut(&join(prefix, "decoders"), f);
        self.final_norm.visit_mut(&join(prefix, "final_norm"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

impl ParamSet {
    /// Parameter tree with every tensor zero-filled.
    pub fn zeros(config: &ModelConfig) -> Result<ParamSet> {
        config.validate()?;
        let d = config.embed_dim;
        let token_in = |c: usize| config.patch_t * config.patch_hw * config.patch_hw * c;
        let n_enc = if config.share_encoders { 1 } else { 2 };
        let n_dec = if config.cross_attention == CrossAttention::Bidirectional { 2 } else { 1 };
        Ok(ParamSet {
            config: config.clone(),
            s1_embed: Linear::new(token_in(config.s1_channels), d),
            s2_embed: Linear::new(token_in(config.s2_channels), d),
            encoders: (0..n_enc).map(|_| EncoderSet::new(config)).collect(),
            decoders: (0..n_dec)
                .map(|_| (0..config.decoder_layers).map(|_| DecoderLayer::new(d, config.mlp_ratio)).collect())
                .collect(),
            final_norm: LayerNorm::new(d),
            head: Mlp::new(d, d, config.patch_hw * config.patch_hw * config.num_classes),
        })
    }

    /// Seeded initialization: uniform within `±1/sqrt(fan_in)` for linear
    /// layers, `±0.02` for positional tables, identity for layer norms.
    /// Tensor `k` in traversal order draws from stream `k` of the seed.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<ParamSet> {
        let mut p = ParamSet::zeros(config)?;
        let mut k = 0u64;
        p.visit_mut("", &mut |_, t| {
            match t.init {
                Init::Zeros => t.data.fill(0.0),
                Init::Ones => t.data.fill(1.0),
                Init::Uniform(bound) => {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    rng.set_stream(k);
                    t.data.iter_mut().for_each(|v| *v = rng.gen_range(-bound..bound));
                }
            }
            k += 1;
        });
        Ok(p)
    }

    pub fn encoder_for(&self, modality: usize) -> &EncoderSet {
        &self.encoders[modality.min(self.encoders.len() - 1)]
    }

    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit("", &mut |n, _| names.push(n));
        names
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let (manifest, payload) = self.to_bytes();
        fs::write(dir.join("manifest.json"), manifest).map_err(|e| ModelError::Io(e.to_string()))?;
        fs::write(dir.join("params.bin"), payload).map_err(|e| ModelError::Io(e.to_string()))?;
        Ok(())
    }

    /// Manifest JSON and raw payload.
    pub fn to_bytes(&self) -> (Vec<u8>, Vec<u8>) {
        let mut entries = Vec::new();
        let mut payload = Vec::with_capacity(self.num_params() * 4);
        let mut offset = 0usize;
        self.visit("", &mut |name, t| {
            entries.push(TensorEntry { name, shape: t.shape.clone(), offset, len: t.len() });
            offset += t.len();
            t.data.iter().for_each(|v| payload.extend_from_slice(&v.to_le_bytes()));
        });
        let manifest = Manifest { format: MANIFEST_FORMAT.into(), config: self.config.clone(), tensors: entries };
        (serde_json::to_vec_pretty(&manifest).expect("manifest serializes"), payload)
    }

    pub fn from_bytes(manifest: &[u8], payload: &[u8]) -> Result<ParamSet> {
        let manifest: Manifest = serde_json::from_slice(manifest).map_err(|e| ModelError::InvalidParams(e.to_string()))?;
        if manifest.format != MANIFEST_FORMAT {
            return Err(ModelError::InvalidParams(format!("unsupported format {}", manifest.format)));
        }
        let mut p = ParamSet::zeros(&manifest.config)?;
        let expected: usize = manifest.tensors.iter().map(|e| e.len).sum();
        if payload.len() != expected * 4 {
            return Err(ModelError::InvalidParams(format!("payload holds {} bytes, manifest needs {}", payload.len(), expected * 4)));
        }
        let mut entries = manifest.tensors.iter();
        let mut error = None;
        p.visit_mut("", &mut |name, t| {
            if error.is_some() {
                return;
            }
            match entries.next() {
                Some(e) if e.name == name && e.shape == t.shape && e.len == t.len() => {
                    let bytes = &payload[e.offset * 4..(e.offset + e.len) * 4];
                    for (v, c) in t.data.iter_mut().zip(bytes.chunks_exact(4)) {
                        *v = f32::from_le_bytes(c.try_into().unwrap());
                    }
                }
                Some(e) => error = Some(format!("expected tensor {name} {:?}, manifest has {} {:?}", t.shape, e.name, e.shape)),
                None => error = Some(format!("manifest is missing tensor {name}")),
            }
        });
        if let Some(e) = error {
            return Err(ModelError::InvalidParams(e));
        }
        if entries.next().is_some() {
            return Err(ModelError::InvalidParams("manifest lists extra tensors".into()));
        }
        Ok(p)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<ParamSet> {
        let dir = dir.as_ref();
        let manifest = fs::read(dir.join("manifest.json")).map_err(|e| ModelError::Io(e.to_string()))?;
        let payload = fs::read(dir.join("params.bin")).map_err(|e| ModelError::Io(e.to_string()))?;
        ParamSet::from_bytes(&manifest, &payload)
    }
}

const MANIFEST_FORMAT: &str = "tcmap-params-v1";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

/// Exact number of parameters for `config`.
pub fn param_count(config: &ModelConfig) -> Result<usize> {
    Ok(ParamSet::zeros(config)?.num_params())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig { embed_dim: 16, heads: 2, patch_hw: 4, image_size: 16, num_classes: 3, s1_channels: 2, s2_channels: 3, ..ModelConfig::default() }
    }

    #[test]
    fn default_count_matches_shape_arithmetic() {
        let c = ModelConfig::default();
        let d = 192;
        let enc = 12 * d * d + 13 * d;
        let dec = 16 * d * d + 19 * d;
        let expected = (64 * 5 * d + d) + (64 * 10 * d + d) + 256 * d + 4 * d + 4 * enc + 2 * d + 2 * dec + 2 * d + (d * d + d) + (d * 64 * 8 + 64 * 8);
        assert_eq!(param_count(&c).unwrap(), expected);
        assert_eq!(expected, 3_337_664);
    }

    #[test]
    fn single_linear_count() {
        assert_eq!(Linear::new(192, 192).num_params(), 192 * 192 + 192);
    }

    #[test]
    fn decoder_depth_is_additive() {
        let c = small();
        let deeper = ModelConfig { decoder_layers: c.decoder_layers * 2, ..c.clone() };
        let per_layer = DecoderLayer::new(c.embed_dim, c.mlp_ratio).num_params();
        assert_eq!(param_count(&deeper).unwrap() - param_count(&c).unwrap(), c.decoder_layers * per_layer);
    }

    #[test]
    fn unshared_encoders_add_one_set() {
        let c = small();
        let unshared = ModelConfig { share_encoders: false, ..c.clone() };
        assert_eq!(param_count(&unshared).unwrap() - param_count(&c).unwrap(), EncoderSet::new(&c).num_params());
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let a = ParamSet::init(&small(), 9).unwrap();
        assert_eq!(a, ParamSet::init(&small(), 9).unwrap());
        assert_ne!(a, ParamSet::init(&small(), 10).unwrap());
        assert!(a.final_norm.gamma.data.iter().all(|&v| v == 1.0));
        let bound = 1.0 / (a.head.fc1.input_dim() as f32).sqrt();
        assert!(a.head.fc1.weight.data.iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn tensor_names_are_unique() {
        let p = ParamSet::zeros(&ModelConfig { share_encoders: false, cross_attention: CrossAttention::Bidirectional, ..small() }).unwrap();
        let mut names = p.tensor_names();
        let n = names.len();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), n);
        assert!(names.contains(&"encoders.1.spatial.0.attn.query.weight".to_string()));
    }

    #[test]
    fn save_load_round_trip() {
        let p = ParamSet::init(&small(), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        p.save(dir.path()).unwrap();
        assert_eq!(ParamSet::load(dir.path()).unwrap(), p);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let p = ParamSet::init(&small(), 3).unwrap();
        let (m, mut bin) = p.to_bytes();
        bin.pop();
        assert!(matches!(ParamSet::from_bytes(&m, &bin), Err(ModelError::InvalidParams(_))));
    }

    #[test]
    fn manifest_with_wrong_shape_is_rejected() {
        let p = ParamSet::init(&small(), 3).unwrap();
        let (m, bin) = p.to_bytes();
        let text = String::from_utf8(m).unwrap().replacen("\"offset\"", "\"offset_x\"", 1);
        assert!(ParamSet::from_bytes(text.as_bytes(), &bin).is_err());
    }
}
