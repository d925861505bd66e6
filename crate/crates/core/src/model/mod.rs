//! Decoder-only causal transformer with hand-written reverse-mode gradients.
//!
//! Pre-norm blocks (`x + attn(ln1(x))`, `x + mlp(ln2(x))`), learned absolute
//! positional embeddings, GELU MLP and an untied output head.

mod backward;
mod forward;
mod gradcheck;
pub mod linalg;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use backward::{loss_and_grads, loss_and_grads_with, Example, LossReport, CHUNK_SIZE};
pub use forward::{attention_dropout_row, forward, forward_batch_logits, Mode};
pub use gradcheck::{grad_check, grad_check_with, GradCheck};
pub use linalg::Real;

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
    pub attn_dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 2,
            n_heads: 4,
            d_model: 128,
            d_ff: 512,
            max_seq_len: 128,
            vocab_size: 0,
            attn_dropout: 0.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_layers == 0 || self.n_heads == 0 || self.d_model == 0 || self.d_ff == 0 {
            return bad("layer, head, width and ff sizes must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.vocab_size == 0 || self.max_seq_len == 0 {
            return bad("vocab_size and max_seq_len must be positive".into());
        }
        if !(0.0..1.0).contains(&self.attn_dropout) {
            return bad(format!("attn_dropout {} outside [0, 1)", self.attn_dropout));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

// Per-layer tensor slots.
pub(crate) const LN1_G: usize = 0;
pub(crate) const LN1_B: usize = 1;
pub(crate) const WQ: usize = 2;
pub(crate) const WK: usize = 3;
pub(crate) const WV: usize = 4;
pub(crate) const WO: usize = 5;
pub(crate) const LN2_G: usize = 6;
pub(crate) const LN2_B: usize = 7;
pub(crate) const W1: usize = 8;
pub(crate) const B1: usize = 9;
pub(crate) const W2: usize = 10;
pub(crate) const B2: usize = 11;
const PER_LAYER: usize = 12;

pub(crate) const TOK_EMB: usize = 0;
pub(crate) const POS_EMB: usize = 1;

/// Index of a per-layer tensor in the flat parameter list.
pub(crate) fn slot(layer: usize, which: usize) -> usize {
    2 + layer * PER_LAYER + which
}

pub(crate) fn final_slot(config: &ModelConfig, which: usize) -> usize {
    2 + config.n_layers * PER_LAYER + which
}

pub(crate) const LNF_G: usize = 0;
pub(crate) const LNF_B: usize = 1;
pub(crate) const HEAD: usize = 2;

/// Names and shapes of every parameter tensor, in storage order.
pub fn param_layout(c: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (d, f, v) = (c.d_model, c.d_ff, c.vocab_size);
    let mut out = vec![
        ("tok_emb".to_string(), vec![v, d]),
        ("pos_emb".to_string(), vec![c.max_seq_len, d]),
    ];
    for l in 0..c.n_layers {
        let per = [
            ("ln1.gain", vec![d]),
            ("ln1.bias", vec![d]),
            ("attn.wq", vec![d, d]),
            ("attn.wk", vec![d, d]),
            ("attn.wv", vec![d, d]),
            ("attn.wo", vec![d, d]),
            ("ln2.gain", vec![d]),
            ("ln2.bias", vec![d]),
            ("mlp.w1", vec![d, f]),
            ("mlp.b1", vec![f]),
            ("mlp.w2", vec![f, d]),
            ("mlp.b2", vec![d]),
        ];
        out.extend(per.into_iter().map(|(n, s)| (format!("layer{l}.{n}"), s)));
    }
    out.push(("lnf.gain".to_string(), vec![d]));
    out.push(("lnf.bias".to_string(), vec![d]));
    out.push(("head".to_string(), vec![d, v]));
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub tensors: Vec<Tensor<T>>,
}

/// Gradients have exactly the layout of the parameters they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet<T> {
    pub tensors: Vec<Tensor<T>>,
}

impl<T: Real> GradientSet<T> {
    pub fn zeros_like(params: &ModelParams<T>) -> Self {
        Self {
            tensors: params
                .tensors
                .iter()
                .map(|t| Tensor::zeros(t.name.clone(), &t.shape))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &GradientSet<T>) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += *y;
            }
        }
    }

    /// Name of the first tensor holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.tensors
            .iter()
            .find(|t| t.data.iter().any(|x| !x.is_finite()))
            .map(|t| t.name.as_str())
    }
}

impl<T: Real> ModelParams<T> {
    /// Weights drawn from `N(0, 0.02^2)`, biases zero, layer-norm gains one.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let tensors = param_layout(config)
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let data = if name.ends_with(".gain") {
                    vec![T::one(); n]
                } else if name.ends_with(".bias") || name.ends_with(".b1") || name.ends_with(".b2") {
                    vec![T::zero(); n]
                } else {
                    (0..n)
                        .map(|_| linalg::lit::<T>(normal.sample(&mut rng)))
                        .collect()
                };
                Tensor { name, shape, data }
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            tensors,
        })
    }

    pub fn n_params(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|x| x.is_finite()))
    }

    pub(crate) fn t(&self, idx: usize) -> &[T] {
        &self.tensors[idx].data
    }

    /// Converts every tensor to another precision.
    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    data: t
                        .data
                        .iter()
                        .map(|x| U::from_f64(x.to_f64().unwrap()).unwrap())
                        .collect(),
                })
                .collect(),
        }
    }

    /// Checks that the tensor list matches the layout implied by the config.
    pub fn validate_layout(&self) -> Result<()> {
        let layout = param_layout(&self.config);
        if layout.len() != self.tensors.len() {
            return Err(Error::Validation(format!(
                "expected {} tensors, found {}",
                layout.len(),
                self.tensors.len()
            )));
        }
        for ((name, shape), t) in layout.iter().zip(&self.tensors) {
            if name != &t.name || shape != &t.shape || t.data.len() != shape.iter().product::<usize>() {
                return Err(Error::Validation(format!(
                    "tensor {} has shape {:?}, expected {name} {shape:?}",
                    t.name, t.shape
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            n_heads: 4,
            d_model: 64,
            d_ff: 128,
            max_seq_len: 32,
            vocab_size: 50,
            attn_dropout: 0.0,
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = ModelParams::<f64>::init(&cfg(), 7).unwrap();
        let b = ModelParams::<f64>::init(&cfg(), 7).unwrap();
        assert_eq!(a, b);
        let c = ModelParams::<f64>::init(&cfg(), 8).unwrap();
        assert_ne!(a, c);
        a.validate_layout().unwrap();
    }

    #[test]
    fn head_dim_arithmetic() {
        assert_eq!(cfg().head_dim(), 16);
    }

    #[test]
    fn init_statistics() {
        let mut c = cfg();
        c.vocab_size = 1000;
        let p = ModelParams::<f64>::init(&c, 1).unwrap();
        let w: Vec<f64> = p
            .tensors
            .iter()
            .filter(|t| t.shape.len() == 2)
            .flat_map(|t| t.data.iter().copied())
            .take(100_000)
            .collect();
        assert_eq!(w.len(), 100_000);
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let var = w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / w.len() as f64;
        let std = var.sqrt();
        assert!((0.019..=0.021).contains(&std), "std {std}");
        for t in &p.tensors {
            if t.name.ends_with(".gain") {
                assert!(t.data.iter().all(|&x| x == 1.0));
            }
            if t.name.ends_with(".bias") {
                assert!(t.data.iter().all(|&x| x == 0.0));
            }
        }
    }

    #[test]
    fn config_validation() {
        let mut c = cfg();
        c.n_heads = 5;
        assert!(c.validate().is_err());
        let mut c = cfg();
        c.attn_dropout = 1.0;
        assert!(c.validate().is_err());
    }
}
