//! Rank agreement between rating sources: Spearman, multilevel partial
//! Spearman with item random intercepts, and the rater-vs-rest band.

mod benchmark;
mod partial;
mod rank;

use std::collections::{BTreeMap, BTreeSet};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

pub use benchmark::{rater_vs_rest_benchmark, BenchmarkBand, BenchmarkConfig, BenchmarkMode, BenchmarkResult, Exclusion, RaterValue};
pub use partial::{
    fit_item_intercepts, partial_spearman_point, partial_spearman_values, PartialSpearmanConfig, PartialSpearmanFit,
    PartialSpearmanResult,
};
pub use rank::{average_ranks, pearson, quantile_sorted, spearman};

use crate::corpus::RatingRecord;
use crate::error::{Error, Result};
use crate::items::ItemRegistry;

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RowKey {
    pub lesson: String,
    /// `None` after lesson aggregation.
    pub chapter: Option<u32>,
    pub item: usize,
}

/// Cells × sources table of normalized scores.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RatingMatrix {
    sources: Vec<String>,
    rows: IndexMap<RowKey, Vec<Option<f64>>>,
}

impl RatingMatrix {
    pub fn new<S: Into<String>>(sources: impl IntoIterator<Item = S>) -> Result<Self> {
        let mut m = RatingMatrix::default();
        for s in sources {
            m.add_source(s)?;
        }
        Ok(m)
    }

    pub fn sources(&self) -> &[String] {
        &self.sources
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn source_index(&self, name: &str) -> Result<usize> {
        self.sources
            .iter()
            .position(|s| s == name)
            .ok_or_else(|| Error::invalid(format!("unknown source {name:?}")))
    }

    pub fn add_source(&mut self, name: impl Into<String>) -> Result<usize> {
        let name = name.into();
        if self.sources.contains(&name) {
            return Err(Error::invalid(format!("duplicate source {name:?}")));
        }
        self.sources.push(name);
        for v in self.rows.values_mut() {
            v.push(None);
        }
        Ok(self.sources.len() - 1)
    }

    pub fn set(&mut self, key: RowKey, source: usize, value: f64) -> Result<()> {
        if source >= self.sources.len() {
            return Err(Error::invalid(format!("source index {source} out of range")));
        }
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("rating for {}", self.sources[source])));
        }
        let n = self.sources.len();
        self.rows.entry(key).or_insert_with(|| vec![None; n])[source] = Some(value);
        Ok(())
    }

    pub fn get(&self, key: &RowKey, source: usize) -> Option<f64> {
        self.rows.get(key).and_then(|v| v.get(source).copied().flatten())
    }

    pub fn rows(&self) -> impl Iterator<Item = (&RowKey, &[Option<f64>])> {
        self.rows.iter().map(|(k, v)| (k, v.as_slice()))
    }

    /// Paired values and item labels on rows where both sources are present.
    pub fn shared(&self, a: usize, b: usize) -> (Vec<f64>, Vec<f64>, Vec<usize>) {
        let (mut xa, mut xb, mut items) = (Vec::new(), Vec::new(), Vec::new());
        for (k, v) in &self.rows {
            if let (Some(x), Some(y)) = (v[a], v[b]) {
                xa.push(x);
                xb.push(y);
                items.push(k.item);
            }
        }
        (xa, xb, items)
    }

    /// Collapses chapters: each source's lesson value is the mean of the
    /// chapters it scored.
    pub fn aggregate_lesson(&self) -> RatingMatrix {
        let n = self.sources.len();
        let mut acc: IndexMap<RowKey, Vec<(f64, usize)>> = IndexMap::new();
        for (k, v) in &self.rows {
            let key = RowKey {
                lesson: k.lesson.clone(),
                chapter: None,
                item: k.item,
            };
            let slot = acc.entry(key).or_insert_with(|| vec![(0.0, 0); n]);
            for (s, x) in v.iter().enumerate() {
                if let Some(x) = x {
                    slot[s].0 += x;
                    slot[s].1 += 1;
                }
            }
        }
        let rows = acc
            .into_iter()
            .map(|(k, v)| (k, v.into_iter().map(|(s, c)| (c > 0).then(|| s / c as f64)).collect()))
            .collect();
        RatingMatrix {
            sources: self.sources.clone(),
            rows,
        }
    }
}

/// One source per rater (sorted by id), one row per rated
/// `(lesson, chapter, item)` cell, values normalized to `[0, 1]`.
pub fn rater_matrix(ratings: &[RatingRecord], items: &ItemRegistry) -> Result<RatingMatrix> {
    let raters: BTreeSet<&str> = ratings.iter().map(|r| r.rater.as_str()).collect();
    let mut m = RatingMatrix::new(raters.iter().copied())?;
    let index: BTreeMap<&str, usize> = raters.iter().enumerate().map(|(i, r)| (*r, i)).collect();
    for r in ratings {
        let j = items
            .index_of(&r.item)
            .ok_or_else(|| Error::invalid(format!("unregistered item {}", r.item)))?;
        let key = RowKey {
            lesson: r.lesson_id.clone(),
            chapter: Some(r.chapter),
            item: j,
        };
        m.set(key, index[r.rater.as_str()], items.item(j).normalize(r.score as f64)?)?;
    }
    Ok(m)
}

/// Partial Spearman between two named sources on their shared rows.
pub fn partial_spearman(
    m: &RatingMatrix,
    src_a: &str,
    src_b: &str,
    cfg: &PartialSpearmanConfig,
) -> Result<PartialSpearmanResult> {
    let (a, b, items) = m.shared(m.source_index(src_a)?, m.source_index(src_b)?);
    partial_spearman_values(&a, &b, &items, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key(lesson: &str, chapter: u32, item: usize) -> RowKey {
        RowKey {
            lesson: lesson.into(),
            chapter: Some(chapter),
            item,
        }
    }

    #[test]
    fn aggregation_examples() {
        let mut m = RatingMatrix::new(["a", "b"]).unwrap();
        m.set(key("L1", 0, 0), 0, 0.2).unwrap();
        m.set(key("L1", 1, 0), 0, 0.4).unwrap();
        for (c, v) in [(0, 0.1), (2, 0.5)] {
            m.set(key("L1", c, 0), 1, v).unwrap();
        }
        let g = m.aggregate_lesson();
        let k = RowKey {
            lesson: "L1".into(),
            chapter: None,
            item: 0,
        };
        assert!((g.get(&k, 0).unwrap() - 0.3).abs() < 1e-15);
        assert!((g.get(&k, 1).unwrap() - 0.3).abs() < 1e-15);
        assert_eq!(g.n_rows(), 1);
    }

    #[test]
    fn one_chapter_aggregates_to_itself() {
        let mut m = RatingMatrix::new(["a"]).unwrap();
        for l in 0..4 {
            m.set(key(&format!("L{l}"), 0, l % 2), 0, l as f64 / 4.0).unwrap();
        }
        let g = m.aggregate_lesson();
        for ((k, v), (k2, v2)) in m.rows().zip(g.rows()) {
            assert_eq!((&k.lesson, k.item), (&k2.lesson, k2.item));
            assert_eq!(v, v2);
        }
    }

    #[test]
    fn shared_rows_only() {
        let mut m = RatingMatrix::new(["a", "b"]).unwrap();
        m.set(key("L1", 0, 0), 0, 1.0).unwrap();
        m.set(key("L1", 0, 1), 0, 2.0).unwrap();
        m.set(key("L1", 0, 1), 1, 3.0).unwrap();
        assert_eq!(m.shared(0, 1), (vec![2.0], vec![3.0], vec![1]));
        assert!(m.add_source("a").is_err());
        assert!(partial_spearman(&m, "a", "zzz", &PartialSpearmanConfig::default()).is_err());
    }
}
