//! Multitask encoder: pooling over a window of sentence embeddings, a shared
//! trunk, and one logistic head per item.

mod checkpoint;
mod forward;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{read_checkpoint, write_checkpoint, CheckpointHeader, CKPT_MAGIC, CKPT_VERSION};
pub(crate) use forward::accumulate_grads;
pub use forward::{forward, loss_and_grads, predict, ForwardCache, Prediction, SQUASH_MARGIN};

use crate::corpus::Window;
use crate::embeddings::EmbeddingStore;
use crate::error::{Error, Result};
use crate::items::N_ITEMS;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Mean,
    #[default]
    Attention,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    Softplus,
}

impl Activation {
    fn apply(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => a.tanh(),
            Activation::Softplus => {
                if a > 30.0 {
                    a
                } else {
                    a.exp().ln_1p()
                }
            }
        }
    }

    /// Derivative given the pre-activation `a` and the output `h`.
    fn derivative(self, a: f64, h: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - h * h,
            Activation::Softplus => 1.0 / (1.0 + (-a).exp()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub pooling: Pooling,
    pub attention_width: usize,
    pub trunk_widths: Vec<usize>,
    pub activation: Activation,
    pub dropout: f64,
    pub n_heads: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            pooling: Pooling::Attention,
            attention_width: 64,
            trunk_widths: vec![512, 256],
            activation: Activation::Tanh,
            dropout: 0.3,
            n_heads: N_ITEMS,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trunk_widths.is_empty() || self.trunk_widths.contains(&0) {
            return Err(Error::Config("trunk widths must be non-empty and positive".into()));
        }
        if self.pooling == Pooling::Attention && self.attention_width == 0 {
            return Err(Error::Config("attention width must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.n_heads == 0 {
            return Err(Error::Config("at least one head is required".into()));
        }
        Ok(())
    }
}

/// Affine layer `y = W x + b` with `W` stored `out × in`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl Dense {
    fn zeros(n_out: usize, n_in: usize) -> Self {
        Dense {
            w: DMatrix::zeros(n_out, n_in),
            b: DVector::zeros(n_out),
        }
    }

    fn glorot(n_out: usize, n_in: usize, rng: &mut ChaCha8Rng) -> Self {
        let a = (6.0 / (n_in + n_out) as f64).sqrt();
        Dense {
            w: DMatrix::from_fn(n_out, n_in, |_, _| rng.random_range(-a..a)),
            b: DVector::zeros(n_out),
        }
    }

    pub fn n_in(&self) -> usize {
        self.w.ncols()
    }

    pub fn n_out(&self) -> usize {
        self.w.nrows()
    }
}

/// Additive attention: score `s_i = qᵀ tanh(W e_i + b)`, weights `softmax(s)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub proj: Dense,
    pub query: DVector<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub input_dim: usize,
    pub attention: Option<AttentionParams>,
    pub trunk: Vec<Dense>,
    pub heads: Dense,
}

impl ModelParams {
    /// Parameters of the right shapes, all zero. Also used for gradients.
    pub fn zeros(input_dim: usize, cfg: &EncoderConfig) -> Result<Self> {
        Self::build(input_dim, cfg, None)
    }

    /// Glorot-uniform weights (variance `2/(fan_in+fan_out)`), zero biases.
    pub fn init(input_dim: usize, cfg: &EncoderConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::build(input_dim, cfg, Some(&mut rng))
    }

    fn build(input_dim: usize, cfg: &EncoderConfig, mut rng: Option<&mut ChaCha8Rng>) -> Result<Self> {
        cfg.validate()?;
        if input_dim == 0 {
            return Err(Error::Config("input dimension must be positive".into()));
        }
        let mut layer = |n_out: usize, n_in: usize| match rng.as_deref_mut() {
            Some(r) => Dense::glorot(n_out, n_in, r),
            None => Dense::zeros(n_out, n_in),
        };
        let attention = match cfg.pooling {
            Pooling::Mean => None,
            Pooling::Attention => {
                let proj = layer(cfg.attention_width, input_dim);
                let q = layer(1, cfg.attention_width);
                Some(AttentionParams {
                    proj,
                    query: DVector::from_column_slice(q.w.as_slice()),
                })
            }
        };
        let mut trunk = Vec::with_capacity(cfg.trunk_widths.len());
        let mut n_in = input_dim;
        for &w in &cfg.trunk_widths {
            trunk.push(layer(w, n_in));
            n_in = w;
        }
        let heads = layer(cfg.n_heads, n_in);
        Ok(ModelParams {
            input_dim,
            attention,
            trunk,
            heads,
        })
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    /// Tensor names in the fixed order used by [`ModelParams::tensors`].
    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        if self.attention.is_some() {
            names.extend(["attn.proj.w", "attn.proj.b", "attn.query"].map(String::from));
        }
        for i in 0..self.trunk.len() {
            names.push(format!("trunk.{i}.w"));
            names.push(format!("trunk.{i}.b"));
        }
        names.push("heads.w".into());
        names.push("heads.b".into());
        names
    }

    /// Flat views of every tensor; matrices are column-major.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        if let Some(a) = &self.attention {
            out.extend([a.proj.w.as_slice(), a.proj.b.as_slice(), a.query.as_slice()]);
        }
        for l in &self.trunk {
            out.extend([l.w.as_slice(), l.b.as_slice()]);
        }
        out.extend([self.heads.w.as_slice(), self.heads.b.as_slice()]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        if let Some(a) = &mut self.attention {
            out.push(a.proj.w.as_mut_slice());
            out.push(a.proj.b.as_mut_slice());
            out.push(a.query.as_mut_slice());
        }
        for l in &mut self.trunk {
            out.push(l.w.as_mut_slice());
            out.push(l.b.as_mut_slice());
        }
        out.push(self.heads.w.as_mut_slice());
        out.push(self.heads.b.as_mut_slice());
        out
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// `self += alpha * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &ModelParams, alpha: f64) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += alpha * y;
            }
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x *= alpha);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }
}

/// Evaluation-mode scores for every window, in window order.
pub fn score_windows(
    params: &ModelParams,
    cfg: &EncoderConfig,
    windows: &[Window],
    store: &EmbeddingStore,
) -> Result<Vec<Vec<f64>>> {
    use rayon::prelude::*;
    windows
        .par_iter()
        .map(|w| Ok(predict(params, cfg, &store.window(w)?)?.scores))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_seeded_with_zero_biases() {
        let cfg = EncoderConfig {
            trunk_widths: vec![16, 8],
            attention_width: 8,
            ..Default::default()
        };
        let a = ModelParams::init(12, &cfg, 4).unwrap();
        let b = ModelParams::init(12, &cfg, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, ModelParams::init(12, &cfg, 5).unwrap());
        for l in &a.trunk {
            assert!(l.b.iter().all(|&x| x == 0.0));
        }
        assert!(a.heads.b.iter().all(|&x| x == 0.0));
        assert!(a.attention.as_ref().unwrap().proj.b.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn glorot_variance() {
        let cfg = EncoderConfig {
            pooling: Pooling::Mean,
            trunk_widths: vec![512, 256],
            ..Default::default()
        };
        let p = ModelParams::init(256, &cfg, 1).unwrap();
        for l in &p.trunk {
            let target = 2.0 / (l.n_in() + l.n_out()) as f64;
            let n = l.w.len() as f64;
            let mean = l.w.iter().sum::<f64>() / n;
            let var = l.w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            assert!((var / target - 1.0).abs() < 0.2, "var {var} target {target}");
        }
    }

    #[test]
    fn tensor_views_agree() {
        let cfg = EncoderConfig {
            trunk_widths: vec![4, 3],
            attention_width: 2,
            n_heads: 5,
            ..Default::default()
        };
        let mut p = ModelParams::init(6, &cfg, 0).unwrap();
        assert_eq!(p.tensor_names().len(), p.tensors().len());
        let expected = 2 * 6 + 2 + 2 + 4 * 6 + 4 + 3 * 4 + 3 + 5 * 3 + 5;
        assert_eq!(p.n_params(), expected);
        let g = p.clone();
        p.add_scaled(&g, -1.0);
        assert!(p.tensors().iter().all(|t| t.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn config_validation() {
        let bad = EncoderConfig {
            dropout: 1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = EncoderConfig {
            trunk_widths: vec![],
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
