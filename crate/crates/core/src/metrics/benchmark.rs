use serde::{Deserialize, Serialize};

use super::partial::{partial_spearman_values, PartialSpearmanConfig};
use super::rank::quantile_sorted;
use super::RatingMatrix;
use crate::error::{Error, Result};
use crate::hash::derive_seed;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchmarkMode {
    /// Each rater against the mean of all other raters on each row.
    #[default]
    VersusRest,
    /// Each rater against every other rater separately, then averaged.
    Pairwise,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub mode: BenchmarkMode,
    pub min_shared: usize,
    pub partial: PartialSpearmanConfig,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            mode: BenchmarkMode::VersusRest,
            min_shared: 3,
            // The band is a spread across raters; per-rater intervals are not needed.
            partial: PartialSpearmanConfig {
                bootstrap: 0,
                ..Default::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RaterValue {
    pub rater: String,
    pub rho: f64,
    pub n_rows: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Exclusion {
    pub rater: String,
    pub n_shared: usize,
    pub reason: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkBand {
    pub mean: f64,
    pub q1: f64,
    pub q3: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkResult {
    pub raters: Vec<RaterValue>,
    pub excluded: Vec<Exclusion>,
    pub band: BenchmarkBand,
}

fn versus_rest(m: &RatingMatrix, r: usize) -> (Vec<f64>, Vec<f64>, Vec<usize>) {
    let (mut a, mut b, mut items) = (Vec::new(), Vec::new(), Vec::new());
    for (k, v) in m.rows() {
        let Some(x) = v[r] else { continue };
        let (s, c) = v
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != r)
            .filter_map(|(_, y)| *y)
            .fold((0.0, 0usize), |(s, c), y| (s + y, c + 1));
        if c > 0 {
            a.push(x);
            b.push(s / c as f64);
            items.push(k.item);
        }
    }
    (a, b, items)
}

/// Correlates every source of `m` (all assumed to be human raters) with the
/// rest of the panel and summarizes the spread.
pub fn rater_vs_rest_benchmark(m: &RatingMatrix, cfg: &BenchmarkConfig) -> Result<BenchmarkResult> {
    let n = m.sources().len();
    if n < 3 {
        return Err(Error::invalid(format!("benchmark needs at least 3 raters, got {n}")));
    }
    let min_shared = cfg.min_shared.max(3);
    let mut raters = Vec::new();
    let mut excluded = Vec::new();
    for r in 0..n {
        let name = m.sources()[r].clone();
        let pcfg = PartialSpearmanConfig {
            seed: derive_seed(cfg.partial.seed, &[r as u64]),
            ..cfg.partial.clone()
        };
        let outcome = match cfg.mode {
            BenchmarkMode::VersusRest => {
                let (a, b, items) = versus_rest(m, r);
                if a.len() < min_shared {
                    Err((a.len(), "too few shared rows".to_string()))
                } else {
                    partial_spearman_values(&a, &b, &items, &pcfg)
                        .map(|p| (p.rho, a.len()))
                        .map_err(|e| (a.len(), e.to_string()))
                }
            }
            BenchmarkMode::Pairwise => {
                let mut vals = Vec::new();
                let mut rows = 0;
                for s in (0..n).filter(|&s| s != r) {
                    let (a, b, items) = m.shared(r, s);
                    if a.len() < min_shared {
                        continue;
                    }
                    if let Ok(p) = partial_spearman_values(&a, &b, &items, &pcfg) {
                        vals.push(p.rho);
                        rows += a.len();
                    }
                }
                if vals.is_empty() {
                    Err((rows, "no partner with enough shared rows".to_string()))
                } else {
                    Ok((vals.iter().sum::<f64>() / vals.len() as f64, rows))
                }
            }
        };
        match outcome {
            Ok((rho, n_rows)) => raters.push(RaterValue { rater: name, rho, n_rows }),
            Err((n_shared, reason)) => {
                log::info!("benchmark: excluding {name}: {reason}");
                excluded.push(Exclusion {
                    rater: name,
                    n_shared,
                    reason,
                })
            }
        }
    }
    if raters.is_empty() {
        return Err(Error::Undefined("no rater could be benchmarked".into()));
    }
    let mut v: Vec<f64> = raters.iter().map(|r| r.rho).collect();
    v.sort_by(f64::total_cmp);
    let band = BenchmarkBand {
        mean: v.iter().sum::<f64>() / v.len() as f64,
        q1: quantile_sorted(&v, 0.25),
        q3: quantile_sorted(&v, 0.75),
    };
    Ok(BenchmarkResult { raters, excluded, band })
}

#[cfg(test)]
mod tests {
    use super::super::RowKey;
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn key(l: usize, item: usize) -> RowKey {
        RowKey {
            lesson: format!("L{l}"),
            chapter: Some(0),
            item,
        }
    }

    /// Rows × items panel where rater `r` sees `truth + shift + N(0, σ²)`.
    fn panel(seed: u64, n_raters: usize, lessons: usize, sigma: f64) -> RatingMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = Normal::new(0.0, 1.0).unwrap();
        let mut m = RatingMatrix::new((0..n_raters).map(|r| format!("r{r}"))).unwrap();
        let shift: Vec<f64> = (0..5).map(|_| z.sample(&mut rng)).collect();
        for l in 0..lessons {
            for (j, s) in shift.iter().enumerate() {
                let t = z.sample(&mut rng);
                for r in 0..n_raters {
                    m.set(key(l, j), r, t + s + sigma * z.sample(&mut rng)).unwrap();
                }
            }
        }
        m
    }

    #[test]
    fn identical_raters_have_zero_width_band() {
        let m = panel(1, 3, 20, 0.0);
        let r = rater_vs_rest_benchmark(&m, &BenchmarkConfig::default()).unwrap();
        assert_eq!(r.raters.len(), 3);
        for v in &r.raters {
            assert!((v.rho - 1.0).abs() < 1e-12);
        }
        assert!((r.band.q3 - r.band.q1).abs() < 1e-12);
    }

    #[test]
    fn sparse_rater_is_excluded() {
        let mut m = panel(2, 3, 10, 0.5);
        let sparse = m.add_source("sparse").unwrap();
        m.set(key(0, 0), sparse, 0.1).unwrap();
        m.set(key(1, 1), sparse, 0.7).unwrap();
        let r = rater_vs_rest_benchmark(&m, &BenchmarkConfig::default()).unwrap();
        assert_eq!(r.excluded.len(), 1);
        assert_eq!(r.excluded[0].rater, "sparse");
        assert_eq!(r.excluded[0].n_shared, 2);
        assert!(r.raters.iter().all(|v| v.rater != "sparse"));
    }

    #[test]
    fn values_match_attenuation_theory() {
        // Rater vs mean of k−1 others, within-item truth variance 1:
        // ρ = 1/√((1+σ²)(1+σ²/(k−1))), and Spearman = (6/π)·asin(ρ/2).
        let (k, sigma) = (6usize, 0.8f64);
        let m = panel(3, k, 400, sigma);
        let r = rater_vs_rest_benchmark(&m, &BenchmarkConfig::default()).unwrap();
        let s2 = sigma * sigma;
        let rho = 1.0 / ((1.0 + s2) * (1.0 + s2 / (k - 1) as f64)).sqrt();
        let expect = 6.0 / std::f64::consts::PI * (rho / 2.0).asin();
        for v in &r.raters {
            assert!((v.rho - expect).abs() < 0.03, "{} vs {expect}", v.rho);
        }
        assert!((r.band.mean - expect).abs() < 0.015);
    }

    #[test]
    fn duplicating_a_rater_does_not_lower_it() {
        for seed in 0..8 {
            let mut m = panel(10 + seed, 4, 30, 1.0);
            let before = rater_vs_rest_benchmark(&m, &BenchmarkConfig::default()).unwrap();
            let dup = m.add_source("dup").unwrap();
            let rows: Vec<(RowKey, f64)> = m.rows().filter_map(|(k, v)| v[0].map(|x| (k.clone(), x))).collect();
            for (k, x) in rows {
                m.set(k, dup, x).unwrap();
            }
            let after = rater_vs_rest_benchmark(&m, &BenchmarkConfig::default()).unwrap();
            assert!(after.raters[0].rho >= before.raters[0].rho - 1e-12, "seed {seed}");
        }
    }

    #[test]
    fn pairwise_mode_runs() {
        let m = panel(4, 4, 30, 0.5);
        let cfg = BenchmarkConfig {
            mode: BenchmarkMode::Pairwise,
            ..Default::default()
        };
        let r = rater_vs_rest_benchmark(&m, &cfg).unwrap();
        let vr = rater_vs_rest_benchmark(&m, &BenchmarkConfig::default()).unwrap();
        // Single partners are noisier than the panel mean.
        assert!(r.band.mean < vr.band.mean);
    }
}
