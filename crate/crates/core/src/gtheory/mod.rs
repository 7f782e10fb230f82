//! Nested variance decomposition of item scores over teacher ⊃ lesson ⊃
//! stage ⊃ chapter ⊃ utterance ⊃ sentence.
//!
//! Each window contributes one score keyed by its final sentence. With one
//! score per sentence the sentence component cannot be told apart from the
//! residual, so it is always reported inside `e`.

mod nested;

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use nested::{fit_nested, method_of_moments, Confounding, EmConfig, Method, NestedDesign, NestedFit};

use crate::corpus::{NestingKey, Window};
use crate::embeddings::EmbeddingStore;
use crate::error::{Error, Result};
use crate::hash::fnv1a64;
use crate::items::ItemRegistry;
use crate::model::{score_windows, EncoderConfig, ModelParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Level {
    Teacher,
    Lesson,
    Stage,
    Chapter,
    Utterance,
    Sentence,
    Residual,
}

impl Level {
    pub const ALL: [Level; 7] = [
        Level::Teacher,
        Level::Lesson,
        Level::Stage,
        Level::Chapter,
        Level::Utterance,
        Level::Sentence,
        Level::Residual,
    ];

    /// Levels carrying a random intercept in the fitted model.
    const FITTED: [Level; 5] = [
        Level::Teacher,
        Level::Lesson,
        Level::Stage,
        Level::Chapter,
        Level::Utterance,
    ];

    pub fn symbol(self) -> &'static str {
        match self {
            Level::Teacher => "T",
            Level::Lesson => "L",
            Level::Stage => "S",
            Level::Chapter => "C",
            Level::Utterance => "U",
            Level::Sentence => "X",
            Level::Residual => "e",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.symbol())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VarianceComponents {
    /// Indexed by [`Level::index`].
    pub sigma2: [f64; 7],
}

impl VarianceComponents {
    pub fn get(&self, level: Level) -> f64 {
        self.sigma2[level.index()]
    }

    pub fn total(&self) -> f64 {
        self.sigma2.iter().sum()
    }
}

/// `ρ_h = σ²_h / Σ σ²`.
pub fn variance_proportions(vc: &VarianceComponents) -> Result<[f64; 7]> {
    if vc.sigma2.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::invalid("variance components must be finite and non-negative"));
    }
    let total = vc.total();
    if total <= 0.0 {
        return Err(Error::Undefined("all variance components are zero".into()));
    }
    Ok(vc.sigma2.map(|v| v / total))
}

/// A level whose variance is reported on another level (`None`: absorbed by
/// the grand mean).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Merge {
    pub level: Level,
    pub into: Option<Level>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecompositionResult {
    pub components: VarianceComponents,
    /// `None` when every component is zero.
    pub proportions: Option<[f64; 7]>,
    pub n_units: [usize; 7],
    pub merges: Vec<Merge>,
    pub degenerate: bool,
    pub converged: bool,
    pub iterations: usize,
}

impl DecompositionResult {
    pub fn proportion(&self, level: Level) -> Option<f64> {
        self.proportions.map(|p| p[level.index()])
    }
}

fn path(key: &NestingKey) -> [u64; 5] {
    [
        fnv1a64(key.teacher.as_bytes()),
        fnv1a64(key.lesson.as_bytes()),
        key.stage as u64,
        key.chapter as u64,
        key.utterance as u64,
    ]
}

/// Fits the five nested intercepts plus residual to `(key, score)` pairs.
pub fn fit_nested_components(obs: &[(NestingKey, f64)], cfg: &EmConfig) -> Result<DecompositionResult> {
    let paths: Vec<[u64; 5]> = obs.iter().map(|(k, _)| path(k)).collect();
    let y: Vec<f64> = obs.iter().map(|(_, v)| *v).collect();
    let design = NestedDesign::from_paths(&paths)?;
    let fit = fit_nested(&design, &y, cfg)?;

    let mut components = VarianceComponents::default();
    let mut n_units = [0usize; 7];
    for (h, level) in Level::FITTED.iter().enumerate() {
        components.sigma2[level.index()] = fit.sigma2[h];
        n_units[level.index()] = fit.n_units[h];
    }
    components.sigma2[Level::Residual.index()] = fit.residual;
    n_units[Level::Sentence.index()] = obs.len();
    n_units[Level::Residual.index()] = obs.len();

    let mut merges = Vec::new();
    for (h, c) in fit.confounded.iter().enumerate() {
        let Some(c) = c else { continue };
        let into = match c {
            Confounding::Intercept => None,
            Confounding::Residual => Some(Level::Residual),
            Confounding::Parent => {
                let mut a = h - 1;
                loop {
                    match fit.confounded[a] {
                        Some(Confounding::Parent) => a -= 1,
                        Some(Confounding::Intercept) => break None,
                        Some(Confounding::Residual) => break Some(Level::Residual),
                        None => break Some(Level::FITTED[a]),
                    }
                }
            }
        };
        merges.push(Merge {
            level: Level::FITTED[h],
            into,
        });
    }
    merges.push(Merge {
        level: Level::Sentence,
        into: Some(Level::Residual),
    });

    let proportions = if fit.degenerate {
        None
    } else {
        variance_proportions(&components).ok()
    };
    Ok(DecompositionResult {
        components,
        proportions,
        n_units,
        merges,
        degenerate: fit.degenerate,
        converged: fit.converged,
        iterations: fit.iterations,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemDecomposition {
    pub item: usize,
    pub result: DecompositionResult,
}

/// Decomposes per-window scores item by item. Each item is keyed by its own
/// instrument's chapterization; windows without one are skipped for it.
pub fn decompose_scores(
    windows: &[Window],
    scores: &[Vec<f64>],
    items: &ItemRegistry,
    cfg: &EmConfig,
) -> Result<Vec<ItemDecomposition>> {
    if windows.len() != scores.len() {
        return Err(Error::Dimension {
            expected: windows.len(),
            got: scores.len(),
        });
    }
    (0..items.len())
        .into_par_iter()
        .map(|j| {
            let inst = items.item(j).instrument;
            let obs: Vec<(NestingKey, f64)> = windows
                .iter()
                .zip(scores)
                .filter_map(|(w, s)| w.key(inst).map(|k| (k, s[j])))
                .collect();
            if obs.len() < 2 {
                return Err(Error::invalid(format!(
                    "item {}: fewer than two keyed windows",
                    items.item(j).code
                )));
            }
            Ok(ItemDecomposition {
                item: j,
                result: fit_nested_components(&obs, cfg)?,
            })
        })
        .collect()
}

/// Scores `windows` with a checkpoint and decomposes the result.
pub fn decompose_predictions(
    params: &ModelParams,
    enc: &EncoderConfig,
    windows: &[Window],
    store: &EmbeddingStore,
    items: &ItemRegistry,
    cfg: &EmConfig,
) -> Result<Vec<ItemDecomposition>> {
    let scores = score_windows(params, enc, windows, store)?;
    decompose_scores(windows, &scores, items, cfg)
}

#[cfg(test)]
mod tests;
