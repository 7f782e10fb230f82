use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::rank::{average_ranks, pearson, quantile_sorted, spearman};
use crate::error::{Error, Result};
use crate::gtheory::{fit_nested, EmConfig, Method, NestedDesign};
use crate::hash::derive_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartialSpearmanConfig {
    /// Bootstrap replicates; 0 skips the interval.
    pub bootstrap: usize,
    pub ci_level: f64,
    /// Refine the moment estimates of τ² and σ² by REML.
    pub reml_polish: bool,
    pub seed: u64,
}

impl Default for PartialSpearmanConfig {
    fn default() -> Self {
        PartialSpearmanConfig {
            bootstrap: 1000,
            ci_level: 0.95,
            reml_polish: true,
            seed: 0,
        }
    }
}

/// One-way random-intercept fit `y_ij = μ + u_j + e_ij` of one source.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartialSpearmanFit {
    pub mu: f64,
    pub tau2: f64,
    pub sigma2: f64,
    /// BLUP of each item intercept, by compact item id.
    pub intercepts: Vec<f64>,
    /// `y − μ − û_j` for every row.
    pub residuals: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartialSpearmanResult {
    pub rho: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub n_rows: usize,
    pub n_items: usize,
    /// Only one item was present, so plain Spearman was reported.
    pub fallback: bool,
}

/// Maps arbitrary item labels to `0..J` in order of first appearance.
fn compact(items: &[usize]) -> (Vec<usize>, usize) {
    let mut ids = BTreeMap::new();
    let mut out = Vec::with_capacity(items.len());
    for &i in items {
        let next = ids.len();
        out.push(*ids.entry(i).or_insert(next));
    }
    (out, ids.len())
}

/// Henderson one-way moment estimates, τ² truncated at zero.
fn one_way_moments(y: &[f64], item: &[usize], j: usize) -> (f64, f64) {
    let n = y.len() as f64;
    let mut cnt = vec![0.0; j];
    let mut sum = vec![0.0; j];
    for (&v, &g) in y.iter().zip(item) {
        cnt[g] += 1.0;
        sum[g] += v;
    }
    let grand = sum.iter().sum::<f64>() / n;
    let ssb: f64 = (0..j).map(|g| cnt[g] * (sum[g] / cnt[g] - grand).powi(2)).sum();
    let ssw: f64 = y
        .iter()
        .zip(item)
        .map(|(&v, &g)| (v - sum[g] / cnt[g]).powi(2))
        .sum();
    let msw = ssw / (n - j as f64);
    let msb = ssb / (j as f64 - 1.0);
    let n0 = (n - cnt.iter().map(|c| c * c).sum::<f64>() / n) / (j as f64 - 1.0);
    (((msb - msw) / n0).max(0.0), msw)
}

/// Fits item random intercepts to one source and residualizes it.
pub fn fit_item_intercepts(y: &[f64], items: &[usize], reml_polish: bool) -> Result<PartialSpearmanFit> {
    if y.len() != items.len() {
        return Err(Error::Dimension {
            expected: y.len(),
            got: items.len(),
        });
    }
    let (item, j) = compact(items);
    if j < 2 {
        return Err(Error::invalid("item intercepts need at least two items"));
    }
    if y.len() <= j {
        return Err(Error::invalid("need more rows than items"));
    }
    let (mut tau2, mut sigma2) = one_way_moments(y, &item, j);
    // A zero moment estimate means no between-item excess; EM would only
    // creep toward the boundary, so the polish is skipped.
    if reml_polish && tau2 > 0.0 && sigma2 > 0.0 {
        let paths: Vec<[u64; 1]> = item.iter().map(|&g| [g as u64]).collect();
        let cfg = EmConfig {
            method: Method::Reml,
            ..Default::default()
        };
        let fit = fit_nested(&NestedDesign::from_paths(&paths)?, y, &cfg)?;
        if fit.confounded[0].is_none() {
            tau2 = fit.sigma2[0];
            sigma2 = fit.residual;
        }
    }
    if !(sigma2 > 0.0) {
        return Err(Error::Undefined("no within-item variation".into()));
    }
    let mut cnt = vec![0.0; j];
    let mut sum = vec![0.0; j];
    for (&v, &g) in y.iter().zip(&item) {
        cnt[g] += 1.0;
        sum[g] += v;
    }
    let (mut wsum, mut wy) = (0.0, 0.0);
    for g in 0..j {
        let w = cnt[g] / (sigma2 + cnt[g] * tau2);
        wsum += w;
        wy += w * sum[g] / cnt[g];
    }
    let mu = wy / wsum;
    let intercepts: Vec<f64> = (0..j)
        .map(|g| {
            let k = cnt[g] * tau2 / (cnt[g] * tau2 + sigma2);
            k * (sum[g] / cnt[g] - mu)
        })
        .collect();
    let residuals = y
        .iter()
        .zip(&item)
        .map(|(&v, &g)| v - mu - intercepts[g])
        .collect();
    Ok(PartialSpearmanFit {
        mu,
        tau2,
        sigma2,
        intercepts,
        residuals,
    })
}

/// Point estimate: residualize each source on item intercepts, rank the
/// residuals, correlate the ranks.
pub fn partial_spearman_point(a: &[f64], b: &[f64], items: &[usize], reml_polish: bool) -> Result<f64> {
    let ra = fit_item_intercepts(a, items, reml_polish)?.residuals;
    let rb = fit_item_intercepts(b, items, reml_polish)?.residuals;
    pearson(&average_ranks(&ra), &average_ranks(&rb))
}

fn percentile_ci(mut reps: Vec<f64>, level: f64, point: f64) -> (f64, f64) {
    if reps.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    reps.sort_by(f64::total_cmp);
    let alpha = (1.0 - level) / 2.0;
    let lo = quantile_sorted(&reps, alpha);
    let hi = quantile_sorted(&reps, 1.0 - alpha);
    // Percentile intervals can exclude a skewed point estimate; widen to it.
    (lo.min(point), hi.max(point))
}

/// Multilevel partial Spearman between sources `a` and `b` observed on the
/// same rows, with a percentile interval from resampling whole items.
pub fn partial_spearman_values(
    a: &[f64],
    b: &[f64],
    items: &[usize],
    cfg: &PartialSpearmanConfig,
) -> Result<PartialSpearmanResult> {
    if a.len() != b.len() || a.len() != items.len() {
        return Err(Error::Dimension {
            expected: a.len(),
            got: b.len().min(items.len()),
        });
    }
    if a.len() < 3 {
        return Err(Error::invalid(format!("need at least 3 shared rows, got {}", a.len())));
    }
    let (item, j) = compact(items);
    let n = a.len();
    if j < 2 {
        log::debug!("single item: reporting plain Spearman");
        let rho = spearman(a, b)?;
        let reps: Vec<f64> = (0..cfg.bootstrap)
            .into_par_iter()
            .filter_map(|r| {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[r as u64]));
                let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
                let xa: Vec<f64> = idx.iter().map(|&i| a[i]).collect();
                let xb: Vec<f64> = idx.iter().map(|&i| b[i]).collect();
                spearman(&xa, &xb).ok()
            })
            .collect();
        let (ci_lo, ci_hi) = percentile_ci(reps, cfg.ci_level, rho);
        return Ok(PartialSpearmanResult {
            rho,
            ci_lo,
            ci_hi,
            n_rows: n,
            n_items: 1,
            fallback: true,
        });
    }
    let rho = partial_spearman_point(a, b, &item, cfg.reml_polish)?;
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); j];
    for (i, &g) in item.iter().enumerate() {
        members[g].push(i);
    }
    let reps: Vec<f64> = (0..cfg.bootstrap)
        .into_par_iter()
        .filter_map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[r as u64]));
            let (mut xa, mut xb, mut xi) = (Vec::new(), Vec::new(), Vec::new());
            for slot in 0..j {
                let g = rng.random_range(0..j);
                for &i in &members[g] {
                    xa.push(a[i]);
                    xb.push(b[i]);
                    xi.push(slot);
                }
            }
            partial_spearman_point(&xa, &xb, &xi, cfg.reml_polish).ok()
        })
        .collect();
    let (ci_lo, ci_hi) = percentile_ci(reps, cfg.ci_level, rho);
    Ok(PartialSpearmanResult {
        rho,
        ci_lo,
        ci_hi,
        n_rows: n,
        n_items: j,
        fallback: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn no_boot() -> PartialSpearmanConfig {
        PartialSpearmanConfig {
            bootstrap: 0,
            ..Default::default()
        }
    }

    #[test]
    fn identical_sources_give_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let items: Vec<usize> = (0..200).map(|i| i % 10).collect();
        let a: Vec<f64> = items.iter().map(|&j| j as f64 * 0.3 + rng.random::<f64>()).collect();
        let r = partial_spearman_values(&a, &a, &items, &no_boot()).unwrap();
        assert!((r.rho - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_item_effects_reduce_to_spearman() {
        // Every item holds the same multiset of values, so τ̂² = 0 exactly.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let base_a: Vec<f64> = (0..8).map(|_| rng.random::<f64>()).collect();
        let base_b: Vec<f64> = (0..8).map(|_| rng.random::<f64>()).collect();
        let (mut a, mut b, mut items) = (Vec::new(), Vec::new(), Vec::new());
        for j in 0..5 {
            for k in 0..8 {
                let p = (k * (j + 1)) % 8;
                a.push(base_a[p]);
                b.push(base_b[(p + j) % 8]);
                items.push(j);
            }
        }
        for reml in [false, true] {
            let fa = fit_item_intercepts(&a, &items, reml).unwrap();
            assert!(fa.tau2 < 1e-9, "tau2 {}", fa.tau2);
        }
        let r = partial_spearman_values(&a, &b, &items, &no_boot()).unwrap();
        let plain = spearman(&a, &b).unwrap();
        assert!((r.rho - plain).abs() < 1e-6, "{} vs {plain}", r.rho);
    }

    #[test]
    fn item_shifts_alone_do_not_correlate() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = Normal::new(0.0, 1.0).unwrap();
        let shift: Vec<f64> = (0..25).map(|_| 2.0 * z.sample(&mut rng)).collect();
        let items: Vec<usize> = (0..2000).map(|i| i % 25).collect();
        let a: Vec<f64> = items.iter().map(|&j| shift[j] + z.sample(&mut rng)).collect();
        let b: Vec<f64> = items.iter().map(|&j| shift[j] + z.sample(&mut rng)).collect();
        assert!(spearman(&a, &b).unwrap() > 0.5);
        let r = partial_spearman_values(&a, &b, &items, &no_boot()).unwrap();
        assert!(r.rho.abs() < 0.1, "{}", r.rho);
    }

    #[test]
    fn affine_transform_leaves_rho_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z = Normal::new(0.0, 1.0).unwrap();
        let items: Vec<usize> = (0..300).map(|i| i % 6).collect();
        let t: Vec<f64> = (0..300).map(|_| z.sample(&mut rng)).collect();
        let a: Vec<f64> = t.iter().zip(&items).map(|(x, &j)| x + j as f64 + 0.5 * z.sample(&mut rng)).collect();
        let b: Vec<f64> = t.iter().map(|x| x + 0.5 * z.sample(&mut rng)).collect();
        let r0 = partial_spearman_values(&a, &b, &items, &no_boot()).unwrap().rho;
        let b2: Vec<f64> = b.iter().map(|x| 3.5 * x - 2.0).collect();
        let r1 = partial_spearman_values(&a, &b2, &items, &no_boot()).unwrap().rho;
        assert!((r0 - r1).abs() < 1e-9);
    }

    #[test]
    fn interval_contains_point_and_narrows_with_data() {
        let z = Normal::new(0.0, 1.0).unwrap();
        let width = |n_items: usize, per: usize| {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let items: Vec<usize> = (0..n_items * per).map(|i| i % n_items).collect();
            let t: Vec<f64> = items.iter().map(|_| z.sample(&mut rng)).collect();
            let a: Vec<f64> = t.iter().map(|x| x + z.sample(&mut rng)).collect();
            let b: Vec<f64> = t.iter().map(|x| x + z.sample(&mut rng)).collect();
            let cfg = PartialSpearmanConfig {
                bootstrap: 300,
                ..Default::default()
            };
            let r = partial_spearman_values(&a, &b, &items, &cfg).unwrap();
            assert!(r.ci_lo <= r.rho && r.rho <= r.ci_hi);
            r.ci_hi - r.ci_lo
        };
        let small = width(5, 10);
        let large = width(20, 40);
        assert!(large < small, "{large} !< {small}");
    }

    #[test]
    fn single_item_falls_back() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        let b = [2.0, 1.0, 4.0, 3.0, 5.0];
        let r = partial_spearman_values(&a, &b, &[7; 5], &no_boot()).unwrap();
        assert!(r.fallback);
        assert_eq!(r.rho, spearman(&a, &b).unwrap());
    }

    #[test]
    fn bootstrap_is_seeded() {
        let items: Vec<usize> = (0..60).map(|i| i % 4).collect();
        let a: Vec<f64> = (0..60).map(|i| ((i * 37) % 11) as f64).collect();
        let b: Vec<f64> = (0..60).map(|i| ((i * 17) % 13) as f64).collect();
        let cfg = PartialSpearmanConfig {
            bootstrap: 50,
            ..Default::default()
        };
        let x = partial_spearman_values(&a, &b, &items, &cfg).unwrap();
        let y = partial_spearman_values(&a, &b, &items, &cfg).unwrap();
        assert_eq!(x, y);
    }
}
