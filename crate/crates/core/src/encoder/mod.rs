//! A small pre-norm transformer bi-encoder stored in a [`TensorArchive`].
//!
//! Parameter names follow the layout the merge expects:
//!
//! | name                     | shape          |
//! |--------------------------|----------------|
//! | `embed_tokens.weight`    | `[vocab, d]`   |
//! | `layers.<i>.attn_norm.weight` | `[d]`     |
//! | `layers.<i>.attn.{wq,wk,wv,wo}` | `[d, d]` |
//! | `layers.<i>.mlp_norm.weight`  | `[d]`     |
//! | `layers.<i>.mlp.w1`, `mlp.w3` | `[d_ff, d]` |
//! | `layers.<i>.mlp.w2`      | `[d, d_ff]`    |
//! | `final_norm.weight`      | `[d]`          |
//!
//! Linear weights are stored `[out, in]`. Each layer is causal multi-head
//! self-attention followed by a SwiGLU feed-forward block, both behind RMS
//! normalization with residual connections. The sequence embedding is the
//! final-normed hidden state at the `eos` position, L2-normalized.
//!
//! Weights are drawn from ChaCha8 (`rand_chacha`) seeded with
//! `seed_from_u64(config.seed)`: embeddings uniform on `[-1, 1)`, linear
//! weights uniform on `[-1/√fan_in, 1/√fan_in)` with the residual output
//! projections (`attn.wo`, `mlp.w2`) further scaled by `1/√(2·n_layers)`,
//! norm weights fixed at 1.

mod tokenizer;

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::merge::SOURCE_KEY;
use crate::tensor_store::{Tensor, TensorArchive};

pub use tokenizer::{fnv1a64, tokenize, TokenizerMode, TokenizerSpec, BOS_ID, EOS_ID, PAD_ID};

const RMS_EPS: f32 = 1e-5;
const EMBED: &str = "embed_tokens.weight";
const FINAL_NORM: &str = "final_norm.weight";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq: usize,
    pub seed: u64,
    /// Prepended to query text (not documents) before tokenization.
    pub query_prefix: String,
    pub tokenizer: TokenizerMode,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 4096,
            d_model: 32,
            n_layers: 8,
            n_heads: 2,
            d_ff: 64,
            max_seq: 64,
            seed: 0,
            query_prefix: String::new(),
            tokenizer: TokenizerMode::Word,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if [self.d_model, self.n_layers, self.n_heads, self.d_ff].contains(&0) {
            return bad("encoder dimensions must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.vocab_size <= 3 {
            return bad(format!("vocab_size {} leaves no room for terms", self.vocab_size));
        }
        if self.max_seq < 2 {
            return bad(format!("max_seq {} cannot hold bos and eos", self.max_seq));
        }
        Ok(())
    }

    pub fn tokenizer_spec(&self) -> TokenizerSpec {
        TokenizerSpec {
            mode: self.tokenizer,
            vocab_size: self.vocab_size,
            max_seq: self.max_seq,
        }
    }

    /// Every parameter name with its shape, in construction order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, f) = (self.d_model, self.d_ff);
        let mut out = vec![(EMBED.to_owned(), vec![self.vocab_size, d])];
        for i in 0..self.n_layers {
            let p = |s: &str| format!("layers.{i}.{s}");
            out.push((p("attn_norm.weight"), vec![d]));
            for w in ["wq", "wk", "wv", "wo"] {
                out.push((p(&format!("attn.{w}")), vec![d, d]));
            }
            out.push((p("mlp_norm.weight"), vec![d]));
            out.push((p("mlp.w1"), vec![f, d]));
            out.push((p("mlp.w2"), vec![d, f]));
            out.push((p("mlp.w3"), vec![f, d]));
        }
        out.push((FINAL_NORM.to_owned(), vec![d]));
        out
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config: Self = serde_json::from_str(&text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

fn is_norm(name: &str) -> bool {
    name.ends_with("norm.weight")
}

pub fn init_encoder(config: &EncoderConfig) -> Result<TensorArchive> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut archive = TensorArchive::new();
    for (name, shape) in config.parameter_shapes() {
        let numel: usize = shape.iter().product();
        let data: Vec<f32> = if is_norm(&name) {
            vec![1.0; numel]
        } else {
            let mut bound = if name == EMBED { 1.0 } else { 1.0 / (shape[1] as f32).sqrt() };
            if name.ends_with("attn.wo") || name.ends_with("mlp.w2") {
                bound /= (2.0 * config.n_layers as f32).sqrt();
            }
            (0..numel).map(|_| rng.random_range(-bound..bound)).collect()
        };
        archive.insert(Tensor::new(name, shape, data)?)?;
    }
    archive.set_metadata(SOURCE_KEY, format!("toy-encoder(seed={})", config.seed));
    Ok(archive)
}

/// Adds a seeded perturbation to every tensor except the token embedding,
/// standing in for a model further trained on domain text.
///
/// Matrices get `strength · rms(W) · (u vᵀ + E) / 2` with `u`, `v`, `E`
/// uniform on `[-1, 1)`; vectors get `strength · rms(w) · e`.
pub fn make_domain_variant(
    base: &TensorArchive,
    config: &EncoderConfig,
    domain_seed: u64,
    strength: f64,
) -> Result<TensorArchive> {
    config.validate()?;
    if !(strength >= 0.0 && strength.is_finite()) {
        return Err(Error::InvalidConfig(format!("perturbation strength {strength}")));
    }
    let source = base.metadata().get(SOURCE_KEY).cloned().unwrap_or_default();
    if strength == 0.0 {
        let mut out = base.clone();
        out.set_metadata(SOURCE_KEY, format!("{source}+domain(seed={domain_seed},strength=0)"));
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(domain_seed);
    let mut out = TensorArchive::new();
    for t in base.tensors() {
        if t.name() == EMBED {
            out.insert(t.clone())?;
            continue;
        }
        let rms = (t.data().iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>() / t.numel() as f64).sqrt();
        let scale = (strength * if rms > 0.0 { rms } else { 1.0 }) as f32;
        let data: Vec<f32> = match *t.shape() {
            [rows, cols] => {
                let u: Vec<f32> = (0..rows).map(|_| rng.random_range(-1.0..1.0)).collect();
                let v: Vec<f32> = (0..cols).map(|_| rng.random_range(-1.0..1.0)).collect();
                t.data()
                    .iter()
                    .enumerate()
                    .map(|(idx, &x)| {
                        let e: f32 = rng.random_range(-1.0..1.0);
                        x + scale * (u[idx / cols] * v[idx % cols] + e) * 0.5
                    })
                    .collect()
            }
            _ => t
                .data()
                .iter()
                .map(|&x| x + scale * rng.random_range(-1.0f32..1.0))
                .collect(),
        };
        out.insert(Tensor::new(t.name(), t.shape().to_vec(), data)?)?;
    }
    for (k, v) in base.metadata() {
        out.set_metadata(k.clone(), v.clone());
    }
    out.set_metadata(
        SOURCE_KEY,
        format!("{source}+domain(seed={domain_seed},strength={strength})"),
    );
    Ok(out)
}

/// Unit-norm sequence embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(Vec<f32>);

impl Embedding {
    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn dot(&self, other: &Embedding) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum()
    }
}

struct LayerWeights<'a> {
    attn_norm: &'a [f32],
    wq: &'a [f32],
    wk: &'a [f32],
    wv: &'a [f32],
    wo: &'a [f32],
    mlp_norm: &'a [f32],
    w1: &'a [f32],
    w2: &'a [f32],
    w3: &'a [f32],
}

/// Borrowed, shape-checked view of an archive ready for forward passes.
pub struct ToyEncoder<'a> {
    config: &'a EncoderConfig,
    tokenizer: TokenizerSpec,
    embed: &'a [f32],
    layers: Vec<LayerWeights<'a>>,
    final_norm: &'a [f32],
}

impl<'a> ToyEncoder<'a> {
    /// Checks every parameter's presence and shape before any arithmetic.
    pub fn new(archive: &'a TensorArchive, config: &'a EncoderConfig) -> Result<Self> {
        config.validate()?;
        for (name, shape) in config.parameter_shapes() {
            let t = archive.get(&name).ok_or_else(|| Error::MissingTensor(name.clone()))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    name,
                    expected: shape,
                    found: t.shape().to_vec(),
                });
            }
        }
        let w = |name: String| archive.get(&name).expect("checked above").data();
        let layers = (0..config.n_layers)
            .map(|i| LayerWeights {
                attn_norm: w(format!("layers.{i}.attn_norm.weight")),
                wq: w(format!("layers.{i}.attn.wq")),
                wk: w(format!("layers.{i}.attn.wk")),
                wv: w(format!("layers.{i}.attn.wv")),
                wo: w(format!("layers.{i}.attn.wo")),
                mlp_norm: w(format!("layers.{i}.mlp_norm.weight")),
                w1: w(format!("layers.{i}.mlp.w1")),
                w2: w(format!("layers.{i}.mlp.w2")),
                w3: w(format!("layers.{i}.mlp.w3")),
            })
            .collect();
        Ok(Self {
            config,
            tokenizer: config.tokenizer_spec(),
            embed: w(EMBED.to_owned()),
            layers,
            final_norm: w(FINAL_NORM.to_owned()),
        })
    }

    pub fn tokenizer(&self) -> &TokenizerSpec {
        &self.tokenizer
    }

    pub fn encode_document(&self, text: &str) -> Result<Embedding> {
        self.forward(&self.tokenizer.tokenize(text))
    }

    pub fn encode_query(&self, text: &str) -> Result<Embedding> {
        if self.config.query_prefix.is_empty() {
            self.encode_document(text)
        } else {
            self.encode_document(&format!("{}{}", self.config.query_prefix, text))
        }
    }

    /// Order-stable parallel encoding.
    pub fn encode_documents<S: AsRef<str> + Sync>(&self, texts: &[S]) -> Result<Vec<Embedding>> {
        texts.par_iter().map(|t| self.encode_document(t.as_ref())).collect()
    }

    pub fn encode_queries<S: AsRef<str> + Sync>(&self, texts: &[S]) -> Result<Vec<Embedding>> {
        texts.par_iter().map(|t| self.encode_query(t.as_ref())).collect()
    }

    /// Runs the transformer over `ids` and pools the last position.
    pub fn forward(&self, ids: &[u32]) -> Result<Embedding> {
        let d = self.config.d_model;
        let f = self.config.d_ff;
        let n = ids.len();
        let mut h = Vec::with_capacity(n * d);
        for &id in ids {
            let id = id as usize;
            if id >= self.config.vocab_size {
                return Err(Error::InvalidConfig(format!("token id {id} outside vocabulary")));
            }
            h.extend_from_slice(&self.embed[id * d..(id + 1) * d]);
        }

        let heads = self.config.n_heads;
        let hd = d / heads;
        let scale = 1.0 / (hd as f32).sqrt();
        let mut x = vec![0.0f32; n * d];
        let mut scores = vec![0.0f32; n];
        for (li, layer) in self.layers.iter().enumerate() {
            rms_norm_rows(&h, layer.attn_norm, d, &mut x);
            let q = linear(&x, n, layer.wq, d, d);
            let k = linear(&x, n, layer.wk, d, d);
            let v = linear(&x, n, layer.wv, d, d);
            let mut attn = vec![0.0f32; n * d];
            for head in 0..heads {
                let off = head * hd;
                for i in 0..n {
                    let qi = &q[i * d + off..i * d + off + hd];
                    let mut max = f32::NEG_INFINITY;
                    for j in 0..=i {
                        let kj = &k[j * d + off..j * d + off + hd];
                        let s = dot(qi, kj) * scale;
                        scores[j] = s;
                        max = max.max(s);
                    }
                    let mut denom = 0.0f32;
                    for s in &mut scores[..=i] {
                        *s = (*s - max).exp();
                        denom += *s;
                    }
                    let out = &mut attn[i * d + off..i * d + off + hd];
                    for j in 0..=i {
                        let p = scores[j] / denom;
                        let vj = &v[j * d + off..j * d + off + hd];
                        for (o, &vv) in out.iter_mut().zip(vj) {
                            *o += p * vv;
                        }
                    }
                }
            }
            let o = linear(&attn, n, layer.wo, d, d);
            add_assign(&mut h, &o);

            rms_norm_rows(&h, layer.mlp_norm, d, &mut x);
            let gate = linear(&x, n, layer.w1, f, d);
            let up = linear(&x, n, layer.w3, f, d);
            let act: Vec<f32> = gate.iter().zip(&up).map(|(&g, &u)| silu(g) * u).collect();
            let down = linear(&act, n, layer.w2, d, f);
            add_assign(&mut h, &down);

            if h.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteActivation { layer: li });
            }
        }

        let last = &h[(n - 1) * d..];
        let mut pooled = vec![0.0f32; d];
        rms_norm_rows(last, self.final_norm, d, &mut pooled);
        let norm = pooled.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::NonFiniteActivation {
                layer: self.layers.len(),
            });
        }
        Ok(Embedding(pooled.iter().map(|&v| (v as f64 / norm) as f32).collect()))
    }
}

pub fn encode(
    archive: &TensorArchive,
    config: &EncoderConfig,
    spec: &TokenizerSpec,
    text: &str,
) -> Result<Embedding> {
    ToyEncoder::new(archive, config)?.forward(&spec.tokenize(text))
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

fn add_assign(acc: &mut [f32], delta: &[f32]) {
    for (a, &b) in acc.iter_mut().zip(delta) {
        *a += b;
    }
}

/// `x [rows, in] · Wᵀ` for `W` stored `[out, in]`.
fn linear(x: &[f32], rows: usize, w: &[f32], out_dim: usize, in_dim: usize) -> Vec<f32> {
    let mut y = vec![0.0f32; rows * out_dim];
    for r in 0..rows {
        let xr = &x[r * in_dim..(r + 1) * in_dim];
        for (o, yo) in y[r * out_dim..(r + 1) * out_dim].iter_mut().enumerate() {
            *yo = dot(xr, &w[o * in_dim..(o + 1) * in_dim]);
        }
    }
    y
}

fn rms_norm_rows(x: &[f32], weight: &[f32], d: usize, out: &mut [f32]) {
    for (xr, or) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        let ms = xr.iter().map(|&v| v * v).sum::<f32>() / d as f32;
        let inv = 1.0 / (ms + RMS_EPS).sqrt();
        for ((o, &v), &g) in or.iter_mut().zip(xr).zip(weight) {
            *o = v * inv * g;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::merge::{merge_archives, LayerPartition, MergeSpec};

    fn small() -> EncoderConfig {
        EncoderConfig {
            seed: 11,
            ..EncoderConfig::default()
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_encoder(&small()).unwrap();
        let b = init_encoder(&small()).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
    }

    #[test]
    fn init_layer_names() {
        let a = init_encoder(&small()).unwrap();
        let mut layers: Vec<usize> = a
            .names()
            .filter_map(|n| crate::merge::layer_index(n).unwrap())
            .collect();
        layers.dedup();
        assert_eq!(layers, (0..8).collect::<Vec<_>>());
        assert_eq!(a.get("embed_tokens.weight").unwrap().shape(), &[4096, 32]);
        assert!(a.get("final_norm.weight").is_some());
    }

    #[test]
    fn seeds_differ() {
        let a = init_encoder(&small()).unwrap();
        let b = init_encoder(&EncoderConfig { seed: 12, ..small() }).unwrap();
        assert!(a.tensors().zip(b.tensors()).any(|(x, y)| !x.bit_eq(y)));
    }

    #[test]
    fn config_validation() {
        assert!(EncoderConfig { n_heads: 3, ..small() }.validate().is_err());
        assert!(EncoderConfig { d_ff: 0, ..small() }.validate().is_err());
        assert!(EncoderConfig { vocab_size: 3, ..small() }.validate().is_err());
        assert!(EncoderConfig { max_seq: 1, ..small() }.validate().is_err());
    }

    #[test]
    fn config_json_field_names() {
        let v = serde_json::to_value(small()).unwrap();
        for key in ["vocab_size", "d_model", "n_layers", "n_heads", "d_ff", "max_seq", "seed"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        let parsed: EncoderConfig = serde_json::from_str(r#"{"seed": 5, "n_layers": 4}"#).unwrap();
        assert_eq!(parsed.seed, 5);
        assert_eq!(parsed.d_model, 32);
        assert_eq!(parsed.query_prefix, "");
    }

    #[test]
    fn encode_is_unit_norm_and_deterministic() {
        let cfg = small();
        let a = init_encoder(&cfg).unwrap();
        let enc = ToyEncoder::new(&a, &cfg).unwrap();
        for text in ["", "heart disease", "a much longer sentence about statins and cholesterol levels"] {
            let e1 = enc.encode_document(text).unwrap();
            let e2 = enc.encode_document(text).unwrap();
            assert_eq!(e1, e2);
            let norm: f64 = e1.dot(&e1).sqrt();
            assert!((norm - 1.0).abs() < 1e-6, "{norm}");
        }
    }

    #[test]
    fn encode_free_function_matches_encoder() {
        let cfg = small();
        let a = init_encoder(&cfg).unwrap();
        let e = encode(&a, &cfg, &cfg.tokenizer_spec(), "vitamin d").unwrap();
        assert_eq!(e, ToyEncoder::new(&a, &cfg).unwrap().encode_document("vitamin d").unwrap());
    }

    #[test]
    fn query_prefix_only_affects_queries() {
        let cfg = EncoderConfig {
            query_prefix: "query: ".into(),
            ..small()
        };
        let a = init_encoder(&cfg).unwrap();
        let enc = ToyEncoder::new(&a, &cfg).unwrap();
        assert_ne!(enc.encode_query("x y").unwrap(), enc.encode_document("x y").unwrap());
        assert_eq!(enc.encode_query("x y").unwrap(), enc.encode_document("query: x y").unwrap());
    }

    #[test]
    fn rejects_wrong_shapes() {
        let cfg = small();
        let a = init_encoder(&cfg).unwrap();
        let other = EncoderConfig { d_ff: 48, ..cfg.clone() };
        assert!(matches!(ToyEncoder::new(&a, &other), Err(Error::ShapeMismatch { .. })));
        let deeper = EncoderConfig { n_layers: 9, ..cfg };
        assert!(matches!(ToyEncoder::new(&a, &deeper), Err(Error::MissingTensor(_))));
    }

    #[test]
    fn non_finite_activation_names_layer() {
        let cfg = EncoderConfig { n_layers: 2, ..small() };
        let base = init_encoder(&cfg).unwrap();
        let mut broken = TensorArchive::new();
        for t in base.tensors() {
            if t.name() == "layers.1.mlp.w2" {
                broken.insert(Tensor::new(t.name(), t.shape().to_vec(), vec![f32::MAX; t.numel()]).unwrap()).unwrap();
            } else {
                broken.insert(t.clone()).unwrap();
            }
        }
        let enc = ToyEncoder::new(&broken, &cfg).unwrap();
        assert!(matches!(
            enc.encode_document("some words here"),
            Err(Error::NonFiniteActivation { layer: 1 })
        ));
    }

    #[test]
    fn domain_variant() {
        let cfg = small();
        let base = init_encoder(&cfg).unwrap();
        assert!(make_domain_variant(&base, &cfg, 3, 0.0).unwrap().tensors().zip(base.tensors()).all(|(a, b)| a.bit_eq(b)));
        let v1 = make_domain_variant(&base, &cfg, 3, 0.1).unwrap();
        let v2 = make_domain_variant(&base, &cfg, 3, 0.1).unwrap();
        assert_eq!(v1.to_bytes(), v2.to_bytes());
        let max_delta = v1
            .tensors()
            .zip(base.tensors())
            .flat_map(|(a, b)| a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()))
            .fold(0.0f32, f32::max);
        assert!(max_delta > 0.0);
        assert!(v1.get("embed_tokens.weight").unwrap().bit_eq(base.get("embed_tokens.weight").unwrap()));
        assert!(make_domain_variant(&base, &cfg, 3, -1.0).is_err());
    }

    #[test]
    fn merged_models_run_and_endpoint_matches() {
        let cfg = small();
        let base = init_encoder(&cfg).unwrap();
        let domain = make_domain_variant(&base, &cfg, 5, 0.1).unwrap();
        let base_enc = ToyEncoder::new(&base, &cfg).unwrap();
        let want = base_enc.encode_document("insulin resistance").unwrap();
        for al in [0.0, 0.25, 0.5, 0.75, 1.0] {
            for au in [0.0, 0.25, 0.5, 0.75, 1.0] {
                let spec = MergeSpec::new(al, au, LayerPartition::halves(cfg.n_layers).unwrap()).unwrap();
                let merged = merge_archives(&base, &domain, &spec).unwrap();
                let e = ToyEncoder::new(&merged, &cfg).unwrap().encode_document("insulin resistance").unwrap();
                if al == 1.0 && au == 1.0 {
                    assert_eq!(e, want);
                }
            }
        }
    }
}
