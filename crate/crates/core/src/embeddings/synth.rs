//! Deterministic stand-in for a frozen sentence encoder.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hash::{derive_seed, splitmix64, unit_f64, Fnv64};

/// Fixed linear map from a latent vector into embedding space. Column `k` is a
/// pseudo-random unit vector derived from `(seed, k)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignalMap {
    dim: usize,
    columns: Vec<Vec<f64>>,
}

impl SignalMap {
    pub fn new(dim: usize, n_latent: usize, seed: u64) -> Self {
        let columns = (0..n_latent)
            .map(|k| {
                let key = derive_seed(seed, &[0x5167_4e41, k as u64]);
                let mut c: Vec<f64> = (0..dim as u64)
                    .map(|i| 2.0 * unit_f64(splitmix64(key.wrapping_add(i))) - 1.0)
                    .collect();
                let norm = c.iter().map(|x| x * x).sum::<f64>().sqrt();
                c.iter_mut().for_each(|x| *x /= norm);
                c
            })
            .collect();
        SignalMap { dim, columns }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_latent(&self) -> usize {
        self.columns.len()
    }

    fn apply_into(&self, latent: &[f64], out: &mut [f64]) -> Result<()> {
        if latent.len() != self.columns.len() {
            return Err(Error::Dimension {
                expected: self.columns.len(),
                got: latent.len(),
            });
        }
        for (c, &z) in self.columns.iter().zip(latent) {
            for (o, &ci) in out.iter_mut().zip(c) {
                *o += z * ci;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthEmbedConfig {
    pub dim: usize,
    pub seed: u64,
    #[serde(default)]
    pub signal_map: Option<SignalMap>,
}

impl SynthEmbedConfig {
    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        let cfg = SynthEmbedConfig {
            dim,
            seed,
            signal_map: None,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_signal(mut self, n_latent: usize) -> Self {
        self.signal_map = Some(SignalMap::new(self.dim, n_latent, self.seed));
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim < 8 {
            return Err(Error::Config(format!(
                "synthetic embedding dim must be at least 8, got {}",
                self.dim
            )));
        }
        if let Some(m) = &self.signal_map {
            if m.dim() != self.dim {
                return Err(Error::Dimension {
                    expected: self.dim,
                    got: m.dim(),
                });
            }
        }
        Ok(())
    }
}

/// Unit vector built from a text-keyed pseudo-random base plus the planted
/// signal. Base components are uniform with variance `1/dim`, so the base has
/// expected squared norm one.
pub fn synth_embed(text: &str, latent: Option<&[f64]>, cfg: &SynthEmbedConfig) -> Result<Vec<f64>> {
    if text.is_empty() {
        return Err(Error::invalid("cannot embed empty text"));
    }
    cfg.validate()?;
    let mut h = Fnv64::new();
    h.update(&cfg.seed.to_le_bytes());
    h.update(text.as_bytes());
    let key = h.finish();
    let scale = (3.0 / cfg.dim as f64).sqrt();
    let mut v: Vec<f64> = (0..cfg.dim as u64)
        .map(|i| (2.0 * unit_f64(splitmix64(key.wrapping_add(i))) - 1.0) * scale)
        .collect();
    if let Some(z) = latent {
        let map = cfg
            .signal_map
            .as_ref()
            .ok_or_else(|| Error::Config("latent signal given without a signal map".into()))?;
        map.apply_into(z, &mut v)?;
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm > 0.0 && norm.is_finite()) {
        return Err(Error::NonFinite("synthetic embedding norm".into()));
    }
    v.iter_mut().for_each(|x| *x /= norm);
    Ok(v)
}
