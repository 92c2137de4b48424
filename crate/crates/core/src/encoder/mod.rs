//! Frozen transformer encoder with trainable per-layer prompts and a tanh
//! projection head.
//!
//! Prompt rows replace the first `k` hidden states at each layer input; the
//! sentence embedding is the final hidden state at position `k`, where the
//! [CLS] token sits after the prompts.

mod checkpoint;
mod model;

pub use checkpoint::{
    export_backbone_blob, import_backbone_blob, load_checkpoint, save_checkpoint, Checkpoint,
};
pub use model::{Bound, Hidden, Mode};

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum PromptType {
    /// An independent `k × d` matrix at every layer input.
    #[default]
    Multilayer,
    /// One matrix written at every layer input.
    Shared,
    /// One matrix at the first layer input only.
    InputOnly,
}

impl PromptType {
    pub fn as_str(self) -> &'static str {
        match self {
            PromptType::Multilayer => "multilayer",
            PromptType::Shared => "shared",
            PromptType::InputOnly => "input-only",
        }
    }

    /// Number of prompt matrices for `layers` layers.
    pub fn matrices(self, layers: usize) -> usize {
        match self {
            PromptType::Multilayer => layers,
            PromptType::Shared | PromptType::InputOnly => 1,
        }
    }
}

impl fmt::Display for PromptType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PromptType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multilayer" => Ok(PromptType::Multilayer),
            "shared" => Ok(PromptType::Shared),
            "input-only" => Ok(PromptType::InputOnly),
            other => Err(Error::Validation(format!(
                "unknown prompt type {other:?} (expected multilayer, shared or input-only)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub ff_dim: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub prompt_len: usize,
    pub prompt_type: PromptType,
    pub dropout: f64,
    pub init_std: f64,
    pub seed: u64,
}

impl EncoderConfig {
    /// Desk-scale defaults: 2 layers, 2 heads, width 32, 8 prompt rows.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            layers: 2,
            heads: 2,
            dim: 32,
            ff_dim: 128,
            vocab_size,
            max_positions: 64,
            prompt_len: 8,
            prompt_type: PromptType::Multilayer,
            dropout: 0.1,
            init_std: 0.02,
            seed: 42,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.layers == 0 || self.heads == 0 || self.dim == 0 || self.ff_dim == 0 {
            return fail("layers, heads, dim and ff_dim must be positive".into());
        }
        if !self.dim.is_multiple_of(self.heads) {
            return fail(format!(
                "dim {} is not divisible by {} heads",
                self.dim, self.heads
            ));
        }
        if self.vocab_size < crate::text::SPECIALS.len() {
            return fail(format!(
                "vocab size {} cannot hold the special tokens",
                self.vocab_size
            ));
        }
        if self.max_positions < 2 {
            return fail("max_positions must be at least 2".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.init_std.is_finite() && self.init_std > 0.0) {
            return fail(format!("init_std {} must be positive", self.init_std));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

/// Weights of one transformer block. Matrices multiply row vectors from the
/// right (`x · W`).
#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
}

impl LayerWeights {
    const NAMES: [&'static str; 16] = [
        "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln1_gain", "ln1_bias", "w1", "b1", "w2",
        "b2", "ln2_gain", "ln2_bias",
    ];

    fn tensors(&self) -> [&Tensor; 16] {
        [
            &self.wq,
            &self.bq,
            &self.wk,
            &self.bk,
            &self.wv,
            &self.bv,
            &self.wo,
            &self.bo,
            &self.ln1_gain,
            &self.ln1_bias,
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
            &self.ln2_gain,
            &self.ln2_bias,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 16] {
        [
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub emb_ln_gain: Tensor,
    pub emb_ln_bias: Tensor,
    pub layers: Vec<LayerWeights>,
}

impl Backbone {
    /// All tensors with stable names, in serialization order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("tok_emb".to_string(), &self.tok_emb),
            ("pos_emb".to_string(), &self.pos_emb),
            ("emb_ln_gain".to_string(), &self.emb_ln_gain),
            ("emb_ln_bias".to_string(), &self.emb_ln_bias),
        ];
        for (j, l) in self.layers.iter().enumerate() {
            for (n, t) in LayerWeights::NAMES.iter().zip(l.tensors()) {
                out.push((format!("layer{j}.{n}"), t));
            }
        }
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![
            ("tok_emb".to_string(), &mut self.tok_emb),
            ("pos_emb".to_string(), &mut self.pos_emb),
            ("emb_ln_gain".to_string(), &mut self.emb_ln_gain),
            ("emb_ln_bias".to_string(), &mut self.emb_ln_bias),
        ];
        for (j, l) in self.layers.iter_mut().enumerate() {
            for (n, t) in LayerWeights::NAMES.iter().zip(l.tensors_mut()) {
                out.push((format!("layer{j}.{n}"), t));
            }
        }
        out
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.named() {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderState {
    pub config: EncoderConfig,
    pub backbone: Backbone,
    /// Empty when `prompt_len == 0`; otherwise `prompt_type.matrices(L)`
    /// matrices of shape `k × d`.
    pub prompts: Vec<Tensor>,
    pub head_w: Tensor,
    pub head_b: Tensor,
    backbone_hash: String,
}

fn normal_tensor(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("std validated positive");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect())
        .expect("positive extents")
}

/// Random backbone keyed by `config.seed`. Weight matrices and embeddings are
/// `N(0, init_std)`; biases start at zero and layer-norm gains at one.
fn init_backbone(config: &EncoderConfig) -> Backbone {
    let (d, f, s) = (config.dim, config.ff_dim, config.init_std);
    let mut rng = seed::rng(config.seed, &[0]);
    let tok_emb = normal_tensor(&mut rng, &[config.vocab_size, d], s);
    let pos_emb = normal_tensor(&mut rng, &[config.max_positions, d], s);
    let layers = (0..config.layers)
        .map(|_| LayerWeights {
            wq: normal_tensor(&mut rng, &[d, d], s),
            bq: Tensor::zeros(&[d]),
            wk: normal_tensor(&mut rng, &[d, d], s),
            bk: Tensor::zeros(&[d]),
            wv: normal_tensor(&mut rng, &[d, d], s),
            bv: Tensor::zeros(&[d]),
            wo: normal_tensor(&mut rng, &[d, d], s),
            bo: Tensor::zeros(&[d]),
            ln1_gain: Tensor::filled(&[d], 1.0),
            ln1_bias: Tensor::zeros(&[d]),
            w1: normal_tensor(&mut rng, &[d, f], s),
            b1: Tensor::zeros(&[f]),
            w2: normal_tensor(&mut rng, &[f, d], s),
            b2: Tensor::zeros(&[d]),
            ln2_gain: Tensor::filled(&[d], 1.0),
            ln2_bias: Tensor::zeros(&[d]),
        })
        .collect();
    Backbone {
        tok_emb,
        pos_emb,
        emb_ln_gain: Tensor::filled(&[d], 1.0),
        emb_ln_bias: Tensor::zeros(&[d]),
        layers,
    }
}

impl EncoderState {
    pub fn init(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let backbone = init_backbone(&config);
        let (d, k, s) = (config.dim, config.prompt_len, config.init_std);
        let mut prng = seed::rng(config.seed, &[1]);
        let prompts = if k == 0 {
            Vec::new()
        } else {
            (0..config.prompt_type.matrices(config.layers))
                .map(|_| normal_tensor(&mut prng, &[k, d], s))
                .collect()
        };
        let mut hrng = seed::rng(config.seed, &[2]);
        let head_w = normal_tensor(&mut hrng, &[d, d], s);
        let backbone_hash = backbone.hash();
        Ok(Self {
            config,
            backbone,
            prompts,
            head_w,
            head_b: Tensor::zeros(&[d]),
            backbone_hash,
        })
    }

    /// Hash recorded when the backbone was created or loaded.
    pub fn backbone_hash(&self) -> &str {
        &self.backbone_hash
    }

    /// Replaces the backbone after checking every shape against the config.
    pub fn set_backbone(&mut self, backbone: Backbone) -> Result<()> {
        let expected = init_shapes(&self.config);
        let got: Vec<(String, Vec<usize>)> = backbone
            .named()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        if expected != got {
            return Err(Error::Validation(
                "backbone shapes do not match the encoder configuration".into(),
            ));
        }
        self.backbone_hash = backbone.hash();
        self.backbone = backbone;
        Ok(())
    }

    /// Trainable tensors in optimizer order: prompts, then head weight and bias.
    pub fn trainable(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = self
            .prompts
            .iter()
            .enumerate()
            .map(|(i, t)| (format!("prompt{i}"), t))
            .collect();
        out.push(("head_w".into(), &self.head_w));
        out.push(("head_b".into(), &self.head_b));
        out
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = self.prompts.iter_mut().collect();
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }
}

fn init_shapes(config: &EncoderConfig) -> Vec<(String, Vec<usize>)> {
    let mut c = config.clone();
    c.init_std = 1.0;
    init_backbone(&c)
        .named()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_backbone() {
        let a = EncoderState::init(EncoderConfig::desk(50)).unwrap();
        let b = EncoderState::init(EncoderConfig::desk(50)).unwrap();
        assert_eq!(a.backbone_hash(), b.backbone_hash());
        assert_eq!(a, b);
        let mut c = EncoderConfig::desk(50);
        c.seed = 43;
        assert_ne!(
            EncoderState::init(c).unwrap().backbone_hash(),
            a.backbone_hash()
        );
    }

    #[test]
    fn init_is_finite_and_prompt_counts_follow_type() {
        for (ty, n) in [
            (PromptType::Multilayer, 2),
            (PromptType::Shared, 1),
            (PromptType::InputOnly, 1),
        ] {
            let mut c = EncoderConfig::desk(20);
            c.prompt_type = ty;
            let s = EncoderState::init(c).unwrap();
            assert_eq!(s.prompts.len(), n);
            assert!(s.backbone.named().iter().all(|(_, t)| t.is_finite()));
            assert!(s.trainable().iter().all(|(_, t)| t.is_finite()));
        }
        let mut c = EncoderConfig::desk(20);
        c.prompt_len = 0;
        assert!(EncoderState::init(c).unwrap().prompts.is_empty());
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = EncoderConfig::desk(20);
        c.heads = 3;
        assert!(matches!(EncoderState::init(c), Err(Error::Config(_))));
        let mut c = EncoderConfig::desk(20);
        c.dropout = 1.0;
        assert!(EncoderState::init(c).is_err());
        assert!("diagonal".parse::<PromptType>().is_err());
        assert_eq!(
            "input-only".parse::<PromptType>().unwrap(),
            PromptType::InputOnly
        );
    }

    #[test]
    fn set_backbone_checks_shapes() {
        let mut s = EncoderState::init(EncoderConfig::desk(20)).unwrap();
        let other = EncoderState::init(EncoderConfig::desk(21)).unwrap();
        assert!(s.set_backbone(other.backbone).is_err());
    }
}
